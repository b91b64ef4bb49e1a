"""Camera math and triplanar texture projection.

Depth maps are backprojected to world coordinates, surface normals come from
central differences of those coordinates, and each pixel picks the world axis
its normal is most aligned with. Texture lookups tile world space with a
fixed period so the same small texture wraps any object without a UV map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class CameraParams:
    """Pinhole intrinsics plus a camera-to-world rigid transform."""

    intrinsics: np.ndarray  # 3x3, [[fx,0,cx],[0,fy,cy],[0,0,1]]
    extrinsics: np.ndarray  # 4x4 camera-to-world
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.extrinsics = np.asarray(self.extrinsics, dtype=np.float64)
        if self.intrinsics.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {self.intrinsics.shape}")
        if self.extrinsics.shape != (4, 4):
            raise ValueError(f"extrinsics must be 4x4, got {self.extrinsics.shape}")
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        rot = self.rotation
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("extrinsic rotation block is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("extrinsic rotation block must have determinant +1")

    @property
    def rotation(self):
        return self.extrinsics[:3, :3]

    @property
    def position(self):
        return self.extrinsics[:3, 3]

    @property
    def fx(self):
        return self.intrinsics[0, 0]

    @property
    def fy(self):
        return self.intrinsics[1, 1]

    @property
    def cx(self):
        return self.intrinsics[0, 2]

    @property
    def cy(self):
        return self.intrinsics[1, 2]


@dataclass
class DepthImage:
    """Metric depth along the camera z-axis with an object validity mask."""

    values: np.ndarray  # HxW float64, meters
    mask: np.ndarray  # HxW bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError(
                f"depth {self.values.shape} and mask {self.mask.shape} must be equal 2-d shapes"
            )
        masked = self.values[self.mask]
        if masked.size and (not np.all(np.isfinite(masked)) or np.any(masked <= 0)):
            raise ValueError("masked-in depths must be finite and positive")


@dataclass
class SurfaceGeometry:
    """Per-pixel world coordinates, unit normals, and axis-selection masks."""

    world_coords: np.ndarray  # HxWx3
    normals: np.ndarray  # HxWx3, unit where valid
    mask_x: np.ndarray  # HxW float 0/1
    mask_y: np.ndarray
    mask_z: np.ndarray
    valid: np.ndarray  # HxW bool; may drop degenerate-normal pixels
    degenerate_count: int = 0


@dataclass
class ProjectionAugmentation:
    """Random world-space shift (in tile periods) and tile-scale multiplier."""

    shift: np.ndarray  # 3-vector, each in [-0.5, 0.5]
    scale: float  # in [0.75, 1.25]

    def __post_init__(self):
        self.shift = np.asarray(self.shift, dtype=np.float64)
        if self.shift.shape != (3,):
            raise ValueError(f"shift must be a 3-vector, got shape {self.shift.shape}")
        if np.any(np.abs(self.shift) > 0.5):
            raise ValueError(f"shift components must lie in [-0.5, 0.5], got {self.shift}")
        if not 0.75 <= self.scale <= 1.25:
            raise ValueError(f"scale must lie in [0.75, 1.25], got {self.scale}")

    @classmethod
    def identity(cls):
        return cls(shift=np.zeros(3), scale=1.0)

    @classmethod
    def sample(cls, rng):
        return cls(shift=rng.uniform(-0.5, 0.5, size=3), scale=1.0 + rng.uniform(-0.25, 0.25))


def intrinsics_from_fov(width, height, fov_x_degrees=60.0):
    """Square-pixel intrinsics with the principal point at the image center."""
    fx = (width / 2.0) / np.tan(np.radians(fov_x_degrees) / 2.0)
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    return np.array([[fx, 0.0, cx], [0.0, fx, cy], [0.0, 0.0, 1.0]])


def orbit_camera(distance, pitch_degrees, rotation_degrees, width, height,
                 target=(0.0, 0.0, 0.0), fov_x_degrees=60.0):
    """Camera on a sphere around ``target``, looking at it, world z up.

    Positive pitch raises the camera above the target. Rotation sweeps the
    azimuth. Valid for pitch away from +-90 where the up vector degenerates.
    """
    if distance <= 0:
        raise ValueError(f"orbit distance must be positive, got {distance}")
    p = np.radians(pitch_degrees)
    r = np.radians(rotation_degrees)
    target = np.asarray(target, dtype=np.float64)
    offset = distance * np.array([np.cos(p) * np.cos(r), np.cos(p) * np.sin(r), np.sin(p)])
    position = target + offset
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, WORLD_UP)
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise ValueError("camera looking straight along world up; pitch too close to 90")
    right = right / norm
    down = np.cross(forward, right)
    extrinsics = np.eye(4)
    extrinsics[:3, 0] = right
    extrinsics[:3, 1] = down
    extrinsics[:3, 2] = forward
    extrinsics[:3, 3] = position
    return CameraParams(
        intrinsics=intrinsics_from_fov(width, height, fov_x_degrees),
        extrinsics=extrinsics,
        width=width,
        height=height,
    )


def pixel_ray_directions(cam):
    """Camera-frame ray directions with unit z, one per pixel (HxWx3)."""
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)], axis=-1
    )


def backproject(depth, cam):
    """World coordinates per pixel; masked-out pixels are zero.

    With unit-z ray directions the depth value is the ray parameter, so the
    local point is simply direction * depth.
    """
    if depth.values.shape != (cam.height, cam.width):
        raise ValueError(
            f"depth shape {depth.values.shape} does not match camera "
            f"{(cam.height, cam.width)}"
        )
    masked = depth.values[depth.mask]
    if masked.size and np.any(masked <= 0):
        raise ValueError("backproject: masked-in depth must be positive")
    dirs = pixel_ray_directions(cam)
    local = dirs * depth.values[..., None]
    world = local @ cam.rotation.T + cam.position
    world[~depth.mask] = 0.0
    return world


def _one_sided_diff(coords, valid, axis):
    """Central difference where both neighbors are valid, one-sided otherwise."""
    plus = np.zeros_like(coords)
    minus = np.zeros_like(coords)
    has_plus = np.zeros(valid.shape, dtype=bool)
    has_minus = np.zeros(valid.shape, dtype=bool)
    src = [slice(None)] * 2
    dst = [slice(None)] * 2
    src[axis], dst[axis] = slice(1, None), slice(None, -1)
    plus[tuple(dst)] = coords[tuple(src)]
    has_plus[tuple(dst)] = valid[tuple(src)]
    src[axis], dst[axis] = slice(None, -1), slice(1, None)
    minus[tuple(dst)] = coords[tuple(src)]
    has_minus[tuple(dst)] = valid[tuple(src)]

    both = has_plus & has_minus
    only_plus = has_plus & ~has_minus
    only_minus = has_minus & ~has_plus
    diff = np.zeros_like(coords)
    diff[both] = plus[both] - minus[both]
    diff[only_plus] = plus[only_plus] - coords[only_plus]
    diff[only_minus] = coords[only_minus] - minus[only_minus]
    return diff


def surface_normals(world_coords, mask, cam):
    """Unit normals facing the camera, from tangent cross products.

    Returns (normals, valid, degenerate_count); pixels whose tangents are
    parallel (cross norm < 1e-12) are dropped from the valid mask.
    """
    mask = np.asarray(mask, dtype=bool)
    tangent_u = _one_sided_diff(world_coords, mask, axis=1)
    tangent_v = _one_sided_diff(world_coords, mask, axis=0)
    normals = np.cross(tangent_u, tangent_v)
    norms = np.linalg.norm(normals, axis=-1)
    degenerate = mask & (norms < 1e-12)
    valid = mask & ~degenerate
    safe = np.where(norms < 1e-12, 1.0, norms)
    normals = normals / safe[..., None]
    # Flip so normals point back toward the camera along the view ray.
    view = world_coords - cam.position
    flip = np.sum(normals * view, axis=-1) > 0
    normals[flip] = -normals[flip]
    normals[~valid] = 0.0
    return normals, valid, int(np.count_nonzero(degenerate))


def triplanar_masks(normals, valid):
    """One-hot axis choice by largest |normal component|; ties favor x then y."""
    scores = np.abs(normals)
    choice = np.argmax(scores, axis=-1)  # first max wins: priority x > y > z
    masks = []
    for axis in range(3):
        m = ((choice == axis) & valid).astype(np.float64)
        masks.append(m)
    return masks[0], masks[1], masks[2]


def compute_surface_geometry(depth, cam):
    world = backproject(depth, cam)
    normals, valid, degenerate = surface_normals(world, depth.mask, cam)
    mx, my, mz = triplanar_masks(normals, valid)
    return SurfaceGeometry(
        world_coords=world,
        normals=normals,
        mask_x=mx,
        mask_y=my,
        mask_z=mz,
        valid=valid,
        degenerate_count=degenerate,
    )


# Texture (row, col) source axes per projection axis: rows follow the
# second-listed world coordinate so a camera-facing plane shows the texture
# upright (world y grows downward in image space).
_AXIS_UV = {0: (2, 1), 1: (2, 0), 2: (1, 0)}


def repeated_coordinates(world_coords, aug, tile_period):
    """Tile world space: fractional position inside the current tile, in [0,1)."""
    if tile_period <= 0:
        raise ValueError(f"tile_period must be positive, got {tile_period}")
    shifted = world_coords + aug.shift * tile_period
    return np.mod(shifted / (tile_period * aug.scale), 1.0)


def triplanar_project(texture, depth, cam, aug=None, tile_period=1.0, geometry=None):
    """Project a texture node onto the depth surface; differentiable in texture.

    Each pixel reads the texel addressed by its two world coordinates
    orthogonal to the chosen axis; the three per-axis reads are combined with
    the mutually exclusive axis masks. Background pixels come out zero.
    """
    if aug is None:
        aug = ProjectionAugmentation.identity()
    texture = texture if isinstance(texture, T.TensorNode) else T.constant(texture)
    if texture.data.ndim != 3 or texture.shape[2] != 3:
        raise ValueError(f"texture must be HxWx3, got shape {texture.shape}")
    if geometry is None:
        geometry = compute_surface_geometry(depth, cam)
    th, tw, _ = texture.shape
    rsc = repeated_coordinates(geometry.world_coords, aug, tile_period)
    h, w = rsc.shape[:2]

    out = None
    axis_masks = (geometry.mask_x, geometry.mask_y, geometry.mask_z)
    for axis in range(3):
        row_src, col_src = _AXIS_UV[axis]
        rows = np.minimum((rsc[..., row_src] * th).astype(np.int64), th - 1)
        cols = np.minimum((rsc[..., col_src] * tw).astype(np.int64), tw - 1)
        idx = np.stack([rows, cols], axis=-1)
        gathered = T.gather_nearest(texture, idx)
        mask3 = np.repeat(axis_masks[axis][..., None], 3, axis=-1)
        piece = T.mul(gathered, T.constant(mask3))
        out = piece if out is None else T.add(out, piece)
    return out
