"""Synthetic scene generation: ray-traced primitives under Lambertian light.

Each sample is a single primitive (sphere, box, or capsule) on a procedural
background, with exact depth from analytic ray intersections. The shading
map keeps only the Lambert cosine term; renders multiply the surface color
by (shading + ambient) so a texture swap re-renders the scene exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraParams, DepthImage, orbit_camera, pixel_ray_directions

AMBIENT = 0.2
DEFAULT_LIGHT_DIR = (-0.35, -0.45, -0.8)  # direction light travels, into the scene
REFERENCE_GRAY = 128.0 / 255.0

BACKGROUND_STYLES = ("flat", "gradient", "checkerboard")

# 8 corners of the RGB cube plus mid gray: the renderer training palette.
BOUNDARY_COLORS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.0, 0.0],
        [1.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 1.0, 1.0],
        [128.0 / 255.0, 128.0 / 255.0, 128.0 / 255.0],
    ]
)

OBJECT_KINDS = ("sphere", "box", "capsule")
KIND_TO_CLASS = {"sphere": "object_a", "box": "object_b", "capsule": "object_c"}
CLASS_NAMES = ("object_a", "object_b", "object_c")


@dataclass
class PrimitiveObject:
    """One parametric solid at a world pose.

    size semantics: sphere (radius,), box (full extents x,y,z, yawed about
    world z), capsule (radius, cylinder height, axis along z).
    """

    kind: str
    size: tuple
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_degrees: float = 0.0

    def __post_init__(self):
        if self.kind not in OBJECT_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.size = tuple(float(s) for s in self.size)
        if any(s <= 0 for s in self.size):
            raise ValueError(f"size components must be positive, got {self.size}")
        expected = {"sphere": 1, "box": 3, "capsule": 2}[self.kind]
        if len(self.size) != expected:
            raise ValueError(
                f"{self.kind} needs {expected} size components, got {len(self.size)}"
            )
        self.position = np.asarray(self.position, dtype=np.float64)

    @property
    def class_name(self):
        return KIND_TO_CLASS[self.kind]


def default_object(kind):
    """Canonical object of each kind, sized to read well from 5-15 m."""
    if kind == "sphere":
        return PrimitiveObject(kind="sphere", size=(1.3,))
    if kind == "box":
        return PrimitiveObject(kind="box", size=(2.4, 1.5, 1.1))
    if kind == "capsule":
        return PrimitiveObject(kind="capsule", size=(0.8, 1.8))
    raise ValueError(f"unknown primitive kind {kind!r}")


@dataclass
class CameraPoseSet:
    """Ranges the evaluation cameras are drawn from."""

    distances: list = field(default_factory=lambda: [(5.0, 15.0)])
    pitches: list = field(default_factory=lambda: [(0.0, 45.0)])
    rotations: list = field(default_factory=lambda: [(0.0, 360.0)])

    def __post_init__(self):
        for name in ("distances", "pitches", "rotations"):
            ranges = getattr(self, name)
            if not ranges:
                raise ValueError(f"pose set: {name} must be non-empty")
            setattr(self, name, [(float(lo), float(hi)) for lo, hi in ranges])
        if any(lo <= 0 for lo, _ in self.distances):
            raise ValueError("pose set: distances must be positive")

    def sample(self, rng):
        def draw(ranges):
            lo, hi = ranges[rng.integers(len(ranges))]
            return float(rng.uniform(lo, hi))

        return draw(self.distances), draw(self.pitches), draw(self.rotations)


@dataclass
class SceneSample:
    """One rendered view plus everything needed to re-render its object."""

    x_ref: np.ndarray  # HxWx3 render, object in reference gray
    mask: np.ndarray  # HxW bool
    depth: DepthImage
    cam: CameraParams
    x_bg: np.ndarray  # HxWx3 background, zero on object pixels
    shading: np.ndarray  # HxW Lambert cosine factor
    background_style: str = "flat"
    base_color: np.ndarray = field(default_factory=lambda: np.full(3, REFERENCE_GRAY))
    obj: PrimitiveObject | None = None
    pose: tuple = ()

    @property
    def x_ref_m(self):
        return self.x_ref * self.mask[..., None]

    @property
    def resolution(self):
        return self.x_ref.shape[0]


def _yaw_matrix(degrees):
    t = np.radians(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * (dirs @ oc)
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    t = np.full(dirs.shape[:-1], np.inf)
    sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sqrt_disc) / (2.0 * a)
    t = np.where(hit & (t_near > 1e-9), t_near, np.inf)
    points = origin + dirs * t[..., None]
    normals = (points - center) / radius
    return t, normals


def _intersect_box(origin, dirs, obj):
    rot = _yaw_matrix(obj.yaw_degrees)
    half = np.asarray(obj.size) / 2.0
    o = (origin - obj.position) @ rot  # world-to-box: multiply by R^T
    d = dirs @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t_lo = (-half - o) * inv
        t_hi = (half - o) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    # Rays parallel to a slab: inside -> that axis never bounds, outside -> miss.
    parallel = np.abs(d) < 1e-12
    inside = np.abs(o) <= half
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = np.max(t1, axis=-1)
    t_far = np.min(t2, axis=-1)
    hit = (t_far >= t_near) & (t_near > 1e-9)
    t = np.where(hit, t_near, np.inf)
    entry_axis = np.argmax(t1, axis=-1)
    sign = -np.sign(np.take_along_axis(d, entry_axis[..., None], axis=-1)[..., 0])
    normals_box = np.zeros(dirs.shape)
    rows = np.arange(normals_box.size // 3).reshape(entry_axis.shape)
    flat = normals_box.reshape(-1, 3)
    flat[rows.reshape(-1), entry_axis.reshape(-1)] = sign.reshape(-1)
    normals = normals_box.reshape(dirs.shape) @ rot.T
    return t, normals


def _intersect_capsule(origin, dirs, obj):
    radius, height = obj.size
    axis_lo = obj.position + np.array([0.0, 0.0, -height / 2.0])
    axis_hi = obj.position + np.array([0.0, 0.0, height / 2.0])

    best_t = np.full(dirs.shape[:-1], np.inf)
    best_n = np.zeros(dirs.shape)

    # Cylinder body: quadratic in the xy components only.
    oc = origin - obj.position
    dx, dy = dirs[..., 0], dirs[..., 1]
    a = dx * dx + dy * dy
    b = 2.0 * (dx * oc[0] + dy * oc[1])
    c = oc[0] ** 2 + oc[1] ** 2 - radius * radius
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cyl = (-b - np.sqrt(np.where(disc >= 0, disc, 0.0))) / (2.0 * a)
    z_hit = origin[2] + dirs[..., 2] * t_cyl
    ok = (disc >= 0) & (a > 1e-12) & (t_cyl > 1e-9) & (np.abs(z_hit - obj.position[2]) <= height / 2.0)
    points = origin + dirs * t_cyl[..., None]
    n_cyl = points - obj.position
    n_cyl[..., 2] = 0.0
    n_cyl = n_cyl / radius
    best_t = np.where(ok, t_cyl, best_t)
    best_n = np.where(ok[..., None], n_cyl, best_n)

    for cap_center in (axis_lo, axis_hi):
        t_cap, n_cap = _intersect_sphere(origin, dirs, cap_center, radius)
        better = t_cap < best_t
        best_t = np.where(better, t_cap, best_t)
        best_n = np.where(better[..., None], n_cap, best_n)
    return best_t, best_n


def _intersect(origin, dirs, obj):
    if obj.kind == "sphere":
        return _intersect_sphere(origin, dirs, obj.position, obj.size[0])
    if obj.kind == "box":
        return _intersect_box(origin, dirs, obj)
    return _intersect_capsule(origin, dirs, obj)


def _background_image(style, height, width):
    if style == "flat":
        return np.broadcast_to(np.array([0.36, 0.44, 0.52]), (height, width, 3)).copy()
    if style == "gradient":
        top = np.array([0.18, 0.28, 0.48])
        bottom = np.array([0.68, 0.58, 0.38])
        frac = np.linspace(0.0, 1.0, height)[:, None, None]
        return np.broadcast_to(top, (height, width, 3)) * (1 - frac) + bottom * frac
    if style == "checkerboard":
        cells = (np.add.outer(np.arange(height) // 16, np.arange(width) // 16)) % 2
        dark = np.array([0.22, 0.22, 0.26])
        light = np.array([0.72, 0.68, 0.62])
        return np.where(cells[..., None] == 0, dark, light)
    raise ValueError(f"unknown background style {style!r}")


def background_images(resolution, copies=1):
    """Object-free frames, one per background style, repeated ``copies`` times.

    Detector training uses these as negatives; the repeat count sets how much
    weight object-free frames carry relative to rendered scenes.
    """
    return [_background_image(style, resolution, resolution)
            for _ in range(copies) for style in BACKGROUND_STYLES]


def shade(color, shading):
    """Surface color under the Lambert + ambient model, clamped to [0,1]."""
    return np.clip(np.asarray(color) * (shading[..., None] + AMBIENT), 0.0, 1.0)


def render_sample(obj, cam, base_color=None, light_dir=DEFAULT_LIGHT_DIR,
                  background_style="flat", pose=()):
    """Ray-trace one primitive into a SceneSample; errors if out of frame."""
    if base_color is None:
        base_color = np.full(3, REFERENCE_GRAY)
    base_color = np.asarray(base_color, dtype=np.float64)
    dirs = pixel_ray_directions(cam) @ cam.rotation.T
    t, normals = _intersect(cam.position, dirs, obj)
    mask = np.isfinite(t)
    if not mask.any():
        raise ValueError(f"object {obj.kind} is fully out of frame for this camera")
    depth_values = np.where(mask, t, 0.0)
    depth = DepthImage(values=depth_values, mask=mask)
    normals = np.where(mask[..., None], normals, 0.0)  # missed rays carry inf/nan

    light = np.asarray(light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shading = np.maximum(0.0, normals @ (-light)) * mask

    bg_full = _background_image(background_style, cam.height, cam.width)
    obj_px = shade(base_color, shading)
    mask3 = mask[..., None]
    x_bg = np.where(mask3, 0.0, bg_full)
    x_ref = np.where(mask3, obj_px, 0.0) + x_bg
    return SceneSample(
        x_ref=x_ref,
        mask=mask,
        depth=depth,
        cam=cam,
        x_bg=x_bg,
        shading=shading,
        background_style=background_style,
        base_color=base_color,
        obj=obj,
        pose=tuple(pose),
    )


def render_ground_truth(sample, eta_p):
    """Re-render the scene with projected texture values in place of the base color."""
    eta_p = np.asarray(eta_p, dtype=np.float64)
    lit = np.clip(eta_p * (sample.shading[..., None] + AMBIENT), 0.0, 1.0)
    return lit * sample.mask[..., None] + sample.x_bg


def bounding_box(mask):
    """Tight axis-aligned box of a mask: (cx, cy, w, h), all in [0,1]."""
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    if not rows.any():
        raise ValueError("bounding_box: empty mask")
    r0, r1 = np.argmax(rows), len(rows) - 1 - np.argmax(rows[::-1])
    c0, c1 = np.argmax(cols), len(cols) - 1 - np.argmax(cols[::-1])
    h, w = mask.shape
    return (
        (c0 + c1 + 1) / 2.0 / w,
        (r0 + r1 + 1) / 2.0 / h,
        (c1 - c0 + 1) / w,
        (r1 - r0 + 1) / h,
    )


def generate_scenes(pose_set, objects, count_per_object, seed, resolution=128,
                    light_dir=DEFAULT_LIGHT_DIR):
    """Reference scenes (gray object) for attack optimization and evaluation.

    Each scene derives its RNG stream from (seed, object index, pose index)
    so any subset can be regenerated independently.
    """
    scenes = []
    for oi, obj in enumerate(objects):
        for pi in range(count_per_object):
            rng = np.random.default_rng((seed, oi, pi))
            pose = pose_set.sample(rng)
            cam = orbit_camera(*pose, resolution, resolution, target=obj.position)
            style = BACKGROUND_STYLES[rng.integers(len(BACKGROUND_STYLES))]
            scenes.append(
                render_sample(obj, cam, background_style=style, light_dir=light_dir, pose=pose)
            )
    return scenes


def generate_dataset(pose_set, objects, colors, poses_per_object, seed,
                     resolution=128, light_dir=DEFAULT_LIGHT_DIR):
    """Renderer-training records: (scene, color, ground-truth render).

    Every pose is rendered once with the gray reference object; each color
    then re-renders the object analytically, giving objects x poses x colors
    records that share scene geometry.
    """
    colors = np.asarray(colors, dtype=np.float64)
    records = []
    for oi, obj in enumerate(objects):
        for pi in range(poses_per_object):
            rng = np.random.default_rng((seed, oi, pi))
            pose = pose_set.sample(rng)
            cam = orbit_camera(*pose, resolution, resolution, target=obj.position)
            style = BACKGROUND_STYLES[rng.integers(len(BACKGROUND_STYLES))]
            sample = render_sample(
                obj, cam, background_style=style, light_dir=light_dir, pose=pose
            )
            for color in colors:
                # A uniform texture projects to the color itself on the mask.
                eta_p = color * sample.mask[..., None]
                gt = render_ground_truth(sample, eta_p)
                records.append({"sample": sample, "color": color.copy(), "target": gt})
    return records


def dataset_manifest(records):
    """JSON-ready description of every record (no pixel data)."""
    entries = []
    for rec in records:
        s = rec["sample"]
        entries.append(
            {
                "kind": s.obj.kind,
                "class": s.obj.class_name,
                "pose": list(s.pose),
                "background": s.background_style,
                "color": [float(c) for c in rec["color"]],
                "intrinsics": s.cam.intrinsics.reshape(-1).tolist(),
                "extrinsics": s.cam.extrinsics.reshape(-1).tolist(),
                "resolution": int(s.resolution),
            }
        )
    return entries
