"""Texture optimization loop, evaluation protocol, and the command-line front end."""

import argparse
import csv
import sys
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from . import tensor as T
from .augment import DigitalTransformSet, identity_transforms, roa, sample_projection_aug
from .detector import (
    ToyDetector,
    average_precision_50,
    detect,
    filter_detections,
    gt_from_scene,
    iou,
    train_toy_detector,
)
from .losses import (
    DominantColorSet,
    LossWeights,
    camouflage_loss,
    extract_dominant_colors,
    smooth_loss,
    stealth_loss,
    total_loss,
)
from .renderer import NtrModel, ntr_forward, ntr_train
from .scenegen import (
    BOUNDARY_COLORS,
    OBJECT_KINDS,
    REFERENCE_GRAY,
    CameraPoseSet,
    background_images,
    default_object,
    generate_dataset,
    generate_scenes,
)
from .geometry import triplanar_project

SCENE_FORMAT = "camotex-scenes"
STAGES = ("project", "render", "composite", "augment", "losses", "update")

# canonical pose buckets for evaluation tables; out-of-range poses clamp
# into the end bins
DISTANCE_EDGES = (5.0, 10.0, 15.0)
PITCH_EDGES = (0.0, 22.5, 45.0)
ROTATION_EDGES = (0.0, 90.0, 180.0, 270.0, 360.0)


class ConfigError(Exception):
    """Bad config file or option values; maps to exit code 1."""


# ---------------------------------------------------------------------------
# scene-set manifests: generation parameters pin the scenes exactly, so
# every command regenerates the same float64 renders instead of parsing
# lossy image files

def write_scene_manifest(path, kinds, poses_per_object, seed, resolution,
                         pose_set=None):
    pose_set = pose_set or CameraPoseSet()
    for kind in kinds:
        if kind not in OBJECT_KINDS:
            raise ValueError(f"unknown object kind {kind!r}, options: {OBJECT_KINDS}")
    payload = {
        "format": SCENE_FORMAT,
        "version": 1,
        "kinds": list(kinds),
        "poses_per_object": int(poses_per_object),
        "seed": int(seed),
        "resolution": int(resolution),
        "distances": [list(r) for r in pose_set.distances],
        "pitches": [list(r) for r in pose_set.pitches],
        "rotations": [list(r) for r in pose_set.rotations],
    }
    fileio.write_manifest(path, payload)
    return payload


def load_scene_manifest(path):
    manifest = fileio.read_manifest(path)
    if manifest.get("format") != SCENE_FORMAT:
        raise ValueError(f"{path}: not a scene manifest")
    return manifest


def _pose_set_from(manifest):
    return CameraPoseSet(
        distances=[tuple(r) for r in manifest["distances"]],
        pitches=[tuple(r) for r in manifest["pitches"]],
        rotations=[tuple(r) for r in manifest["rotations"]],
    )


def scenes_from_manifest(manifest):
    objects = [default_object(kind) for kind in manifest["kinds"]]
    return generate_scenes(
        _pose_set_from(manifest), objects, manifest["poses_per_object"],
        manifest["seed"], resolution=manifest["resolution"],
    )


# ---------------------------------------------------------------------------
# model checkpoints with embedded construction parameters

def save_detector(path, model):
    arrays = model.state_arrays()
    arrays["config.resolution"] = np.array(float(model.resolution))
    arrays["config.grid"] = np.array(float(model.grid))
    arrays["config.num_classes"] = np.array(float(model.num_classes))
    fileio.save_checkpoint(path, arrays)


def load_detector(path):
    arrays = fileio.load_checkpoint(path)
    try:
        resolution = int(arrays.pop("config.resolution"))
        grid = int(arrays.pop("config.grid"))
        num_classes = int(arrays.pop("config.num_classes"))
    except KeyError as exc:
        raise ValueError(f"{path}: detector checkpoint missing {exc}") from None
    model = ToyDetector(resolution=resolution, grid=grid, num_classes=num_classes)
    model.load_state(arrays)
    return model


def save_ntr(path, model):
    fileio.save_checkpoint(path, model.state_arrays())


def load_ntr(path):
    model = NtrModel()
    model.load_state(fileio.load_checkpoint(path))
    return model


# ---------------------------------------------------------------------------
# attack configuration and report

@dataclass
class AttackConfig:
    dataset_path: str
    eval_dataset_path: str
    ntr_checkpoint: str
    detector_checkpoint: str
    colors_path: str
    texture_size: int = 64
    tile_period: float = 1.0
    epochs: int = 30
    batch_size: int = 8
    lr: float = 0.01
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    transforms: DigitalTransformSet = field(default_factory=DigitalTransformSet)
    use_projection_aug: bool = True
    use_roa: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.texture_size < 2:
            raise ValueError(f"texture_size must be >= 2, got {self.texture_size}")
        for label, p in (("dataset", self.dataset_path),
                         ("eval dataset", self.eval_dataset_path),
                         ("NTR checkpoint", self.ntr_checkpoint),
                         ("detector checkpoint", self.detector_checkpoint),
                         ("colors file", self.colors_path)):
            if not Path(p).exists():
                raise ValueError(f"{label} file not found: {p}")


@dataclass
class EvalBucket:
    dimension: str
    lo: float
    hi: float
    ap: float
    scene_count: int


@dataclass
class EvalReport:
    overall_ap: float  # percent
    mean_valid_score: float
    buckets: list
    kind_aps: dict

    def __post_init__(self):
        values = [self.overall_ap] + [b.ap for b in self.buckets]
        values += list(self.kind_aps.values())
        for v in values:
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"AP {v} outside [0, 100]")


@dataclass
class AttackReport:
    epoch_rows: list  # {"epoch", "l_atk", "l_sm", "l_cm", "l_total"}
    texture: np.ndarray
    pre_eval: EvalReport
    post_eval: EvalReport


# ---------------------------------------------------------------------------
# rendering one scene through the full differentiable path

def _composite(x_adv_m, scene):
    mask3 = np.repeat(scene.mask[..., None].astype(np.float64), 3, axis=2)
    return T.add(T.mul(x_adv_m, T.constant(mask3)), T.constant(scene.x_bg))


def render_textured_scene(texture, scene, ntr, tile_period=1.0, aug=None):
    """Project, neural-render, and composite one texture onto one scene."""
    eta_p = triplanar_project(texture, scene.depth, scene.cam, aug=aug,
                              tile_period=tile_period)
    x_adv_m = ntr_forward(ntr, scene.x_ref_m, eta_p)
    return _composite(x_adv_m, scene)


def gray_texture(size):
    return np.full((size, size, 3), REFERENCE_GRAY)


# ---------------------------------------------------------------------------
# evaluation protocol

def _bucket_slices(scenes):
    dims = (("distance", 0, DISTANCE_EDGES), ("pitch", 1, PITCH_EDGES),
            ("rotation", 2, ROTATION_EDGES))
    for name, axis, edges in dims:
        for lo, hi in zip(edges[:-1], edges[1:]):
            members = []
            for si, scene in enumerate(scenes):
                v = scene.pose[axis]
                v = min(max(v, edges[0]), np.nextafter(edges[-1], -np.inf))
                if lo <= v < hi:
                    members.append(si)
            yield name, lo, hi, members


def _scene_detections(texture, scene, detector, ntr, tile_period):
    x_adv = render_textured_scene(T.constant(texture), scene, ntr, tile_period)
    dets = detect(detector, x_adv)
    gt_box = gt_from_scene(scene).box
    valid = [d.score for d in dets if iou(d.box, gt_box) > 0.5]
    pairs = [(d.box, d.score) for d in filter_detections(dets)]
    return pairs, gt_box, (max(valid) if valid else 0.0)


def evaluate_texture(texture, scenes, detector, ntr, tile_period=1.0):
    """AP@0.5 tables for one texture: overall, per pose bucket, per object kind.

    Scenes render through the same triplanar + renderer path used by the
    attack, with no digital augmentation; detections use the evaluation
    score threshold. ``mean_valid_score`` averages each scene's strongest
    unthresholded detection overlapping the ground truth.
    """
    if not scenes:
        raise ValueError("evaluate_texture: no scenes")
    per_scene = [
        _scene_detections(texture, scene, detector, ntr, tile_period)
        for scene in scenes
    ]
    det_lists = [p[0] for p in per_scene]
    gt_lists = [[p[1]] for p in per_scene]
    overall = 100.0 * average_precision_50(det_lists, gt_lists)
    mean_valid = float(np.mean([p[2] for p in per_scene]))

    buckets = []
    for name, lo, hi, members in _bucket_slices(scenes):
        if not members:
            warnings.warn(f"empty {name} bucket [{lo}, {hi}) omitted")
            continue
        ap = 100.0 * average_precision_50(
            [det_lists[i] for i in members], [gt_lists[i] for i in members]
        )
        buckets.append(EvalBucket(name, lo, hi, ap, len(members)))

    kind_aps = {}
    for kind in sorted({s.obj.kind for s in scenes}):
        members = [i for i, s in enumerate(scenes) if s.obj.kind == kind]
        kind_aps[kind] = 100.0 * average_precision_50(
            [det_lists[i] for i in members], [gt_lists[i] for i in members]
        )
    return EvalReport(overall, mean_valid, buckets, kind_aps)


def valid_score_under_transforms(texture, scenes, detector, ntr, tile_period=1.0,
                                 transforms=None, draws=5, seed=9,
                                 use_projection_aug=True, use_roa=True):
    """Mean strongest valid detection score over random viewing transforms.

    The clean protocol renders each scene once with no augmentation; this
    variant averages over ``draws`` random texture placements and digital
    transform draws per scene, scoring against the transformed ground-truth
    box. It measures how well a texture holds up under the variation the
    attack's expectation terms model, which is what ablation comparisons
    need: a texture optimized without a transform family looks strong on
    clean renders but decays under that family.
    """
    if not scenes:
        raise ValueError("valid_score_under_transforms: no scenes")
    if draws < 1:
        raise ValueError(f"valid_score_under_transforms: draws must be >= 1, got {draws}")
    if transforms is None:
        transforms = DigitalTransformSet()
    tex_node = T.constant(np.asarray(texture, dtype=np.float64))
    total = 0.0
    for si, scene in enumerate(scenes):
        gt_box = gt_from_scene(scene).box
        for d in range(draws):
            rng = np.random.default_rng((seed, si, d))
            aug = sample_projection_aug(rng) if use_projection_aug else None
            x_adv = render_textured_scene(tex_node, scene, ntr, tile_period, aug=aug)
            box = gt_box
            if use_roa:
                x_adv, record = roa(x_adv, transforms, rng)
                box = record.transform_box(gt_box)
            dets = detect(detector, x_adv)
            valid = [dt.score for dt in dets if iou(dt.box, box) > 0.5]
            total += max(valid) if valid else 0.0
    return total / (len(scenes) * draws)


# ---------------------------------------------------------------------------
# the optimization loop

def run_attack(cfg, hook=None):
    """Optimize a texture against the detector under sampled augmentations.

    Per iteration and per scene: project the texture with fresh projection
    jitter, neural-render, composite over the background, digitally augment,
    and score; the batch's mean stealth loss joins the two texture
    regularizers for one Adam step, and the texture re-clamps to [0,1].
    ``hook(stage, payload)`` fires after each pipeline stage when given.
    """
    cfg.validate()
    scenes = scenes_from_manifest(load_scene_manifest(cfg.dataset_path))
    eval_scenes = scenes_from_manifest(load_scene_manifest(cfg.eval_dataset_path))
    ntr = load_ntr(cfg.ntr_checkpoint)
    detector = load_detector(cfg.detector_checkpoint)
    colors = DominantColorSet.from_text(
        Path(cfg.colors_path).read_text(), source=cfg.colors_path
    )

    def emit(stage, payload=None):
        if hook is not None:
            hook(stage, payload)

    eta_rng = np.random.default_rng((cfg.seed, zlib.crc32(b"eta-init")))
    eta = T.parameter(eta_rng.uniform(0.0, 1.0, size=(cfg.texture_size,
                                                      cfg.texture_size, 3)))
    adam = T.AdamState.for_param(eta, lr=cfg.lr)

    pre_eval = evaluate_texture(gray_texture(cfg.texture_size), eval_scenes,
                                detector, ntr, cfg.tile_period)

    epoch_rows = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(scenes))
        sums = {"l_atk": 0.0, "l_sm": 0.0, "l_cm": 0.0, "l_total": 0.0}
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            atk_terms = []
            for scene_index in batch:
                scene = scenes[scene_index]
                rng = np.random.default_rng((cfg.seed, int(scene_index), epoch))
                aug = sample_projection_aug(rng) if cfg.use_projection_aug else None
                eta_p = triplanar_project(eta, scene.depth, scene.cam, aug=aug,
                                          tile_period=cfg.tile_period)
                emit("project", eta_p)
                x_adv_m = ntr_forward(ntr, scene.x_ref_m, eta_p)
                emit("render", x_adv_m)
                x_adv = _composite(x_adv_m, scene)
                emit("composite", x_adv)
                transforms = cfg.transforms if cfg.use_roa else identity_transforms()
                x_adv_a, record = roa(x_adv, transforms, rng)
                emit("augment", x_adv_a)
                detections = detect(detector, x_adv_a)
                gt_box = record.transform_box(gt_from_scene(scene).box)
                atk_terms.append(
                    stealth_loss(detections, gt_box,
                                 iou_threshold=cfg.weights.iou_threshold)
                )
            l_atk = T.div(T.reduce_sum(T.stack(atk_terms)), float(len(atk_terms)))
            l_sm = smooth_loss(eta)
            l_cm = camouflage_loss(eta, colors)
            l_total = total_loss(l_atk, l_sm, l_cm, cfg.weights)
            emit("losses", {"l_atk": l_atk, "l_sm": l_sm, "l_cm": l_cm,
                            "l_total": l_total})
            parts = {"l_atk": l_atk.item(), "l_sm": l_sm.item(),
                     "l_cm": l_cm.item(), "l_total": l_total.item()}
            if any(np.isnan(v) for v in parts.values()):
                raise RuntimeError(
                    f"NaN loss at epoch {epoch} batch {start // cfg.batch_size}: "
                    + ", ".join(f"{k}={v}" for k, v in parts.items())
                )
            eta.zero_grad()
            l_total.backward()
            T.adam_step(eta, adam)
            np.clip(eta.data, 0.0, 1.0, out=eta.data)
            emit("update", eta)
            for key, v in parts.items():
                sums[key] += v * len(batch)
            seen += len(batch)
        epoch_rows.append(
            {"epoch": epoch, **{k: sums[k] / seen for k in sums}}
        )

    post_eval = evaluate_texture(eta.data.copy(), eval_scenes, detector, ntr,
                                 cfg.tile_period)
    return AttackReport(
        epoch_rows=epoch_rows,
        texture=eta.data.copy(),
        pre_eval=pre_eval,
        post_eval=post_eval,
    )


# ---------------------------------------------------------------------------
# report files

def write_attack_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_atk", "l_sm", "l_cm", "l_total"])
        for row in report.epoch_rows:
            writer.writerow([row["epoch"]] + [repr(row[k]) for k in
                                              ("l_atk", "l_sm", "l_cm", "l_total")])


def write_eval_csv(path, report):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "label", "lo", "hi", "scenes", "ap",
                         "mean_valid_score"])
        writer.writerow(["overall", "", "", "", "", repr(report.overall_ap),
                         repr(report.mean_valid_score)])
        for b in report.buckets:
            writer.writerow(["bucket", b.dimension, repr(b.lo), repr(b.hi),
                             b.scene_count, repr(b.ap), ""])
        for kind, ap in sorted(report.kind_aps.items()):
            writer.writerow(["kind", kind, "", "", "", repr(ap), ""])


def write_texture(out_dir, texture, stem="texture"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    png = out_dir / f"{stem}.png"
    sidecar = out_dir / f"{stem}.f64"
    fileio.write_png(png, np.round(texture * 255.0).astype(np.uint8))
    fileio.write_depth(sidecar, texture, channels=3)
    return png, sidecar


def read_texture(path):
    texture = fileio.read_depth(path)
    if texture.ndim != 3 or texture.shape[2] != 3:
        raise ValueError(f"{path}: expected an HxWx3 texture sidecar")
    return texture


# ---------------------------------------------------------------------------
# command-line interface

def _parse_config_file(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for ln, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _need(cfg, key):
    if key not in cfg:
        raise ConfigError(f"missing config key: {key}")
    return cfg[key]


def _get_int(cfg, key, default=None):
    raw = cfg.get(key)
    if raw is None:
        if default is None:
            raise ConfigError(f"missing config key: {key}")
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: expected integer, got {raw!r}") from None


def _get_float(cfg, key, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: expected number, got {raw!r}") from None


def _get_bool(cfg, key, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"config key {key}: expected boolean, got {raw!r}")


def _seed_of(cfg, args):
    return args.seed if args.seed is not None else _get_int(cfg, "seed", 0)


def cmd_gen_scenes(cfg, args):
    kinds = [k.strip() for k in _need(cfg, "kinds").split(",") if k.strip()]
    pose_set = CameraPoseSet()
    write_scene_manifest(
        _need(cfg, "out"), kinds,
        _get_int(cfg, "poses_per_object"),
        _seed_of(cfg, args),
        _get_int(cfg, "resolution", 64),
        pose_set=pose_set,
    )
    print(f"wrote scene manifest: {cfg['out']}")
    return 0


def cmd_train_ntr(cfg, args):
    manifest = load_scene_manifest(_need(cfg, "scenes"))
    objects = [default_object(kind) for kind in manifest["kinds"]]
    records = generate_dataset(
        _pose_set_from(manifest), objects, BOUNDARY_COLORS,
        manifest["poses_per_object"], manifest["seed"],
        resolution=manifest["resolution"],
    )
    model = NtrModel(seed=_seed_of(cfg, args))
    report = ntr_train(
        model, records,
        epochs=_get_int(cfg, "epochs", 20),
        batch_size=_get_int(cfg, "batch_size", 8),
        lr=_get_float(cfg, "lr", 0.002),
        seed=_seed_of(cfg, args),
    )
    save_ntr(_need(cfg, "out"), model)
    print(f"trained renderer on {report.train_size} records; "
          f"held-out SSIM {report.held_out_ssim:.4f} "
          f"(constant baseline {report.constant_baseline_ssim:.4f})")
    return 0


def cmd_train_detector(cfg, args):
    manifest = load_scene_manifest(_need(cfg, "scenes"))
    resolution = manifest["resolution"]
    if resolution % 16:
        raise ValueError(f"detector needs resolution divisible by 16, got {resolution}")
    scenes = scenes_from_manifest(manifest)
    model = ToyDetector(resolution=resolution, grid=resolution // 16,
                        seed=_seed_of(cfg, args))
    neg_copies = _get_int(cfg, "negative_copies", 0)
    report = train_toy_detector(
        model, scenes,
        epochs=_get_int(cfg, "epochs", 30),
        batch_size=_get_int(cfg, "batch_size", 8),
        lr=_get_float(cfg, "lr", 0.01),
        seed=_seed_of(cfg, args),
        transforms=DigitalTransformSet() if _get_bool(cfg, "augment", True) else None,
        negatives=background_images(resolution, neg_copies) if neg_copies else None,
    )
    save_detector(_need(cfg, "out"), model)
    print(f"trained detector on {report.sample_count} images; "
          f"final loss {report.epoch_losses[-1]:.4f}")
    return 0


def cmd_extract_colors(cfg, args):
    scenes = scenes_from_manifest(load_scene_manifest(_need(cfg, "scenes")))
    colors = extract_dominant_colors(
        [s.x_bg for s in scenes],
        _get_int(cfg, "k", 4),
        seed=_seed_of(cfg, args),
        masks=[~s.mask for s in scenes],
        source=cfg["scenes"],
    )
    out = _need(cfg, "out")
    Path(out).write_text(colors.to_text())
    print(f"wrote {colors.colors.shape[0]} dominant colors: {out}")
    return 0


def _attack_config(cfg, args):
    weights = LossWeights(
        alpha=_get_float(cfg, "alpha", 1.0),
        beta=_get_float(cfg, "beta", 0.25),
        gamma=_get_float(cfg, "gamma", 0.25),
        iou_threshold=_get_float(cfg, "iou_threshold", 0.5),
    )
    transforms = DigitalTransformSet(
        brightness_delta=_get_float(cfg, "brightness_delta", 0.25),
        contrast_range=(_get_float(cfg, "contrast_lo", 0.75),
                        _get_float(cfg, "contrast_hi", 1.5)),
        scale_range=(_get_float(cfg, "scale_lo", 0.25),
                     _get_float(cfg, "scale_hi", 1.0)),
    )
    return AttackConfig(
        dataset_path=_need(cfg, "dataset"),
        eval_dataset_path=_need(cfg, "eval_dataset"),
        ntr_checkpoint=_need(cfg, "ntr"),
        detector_checkpoint=_need(cfg, "detector"),
        colors_path=_need(cfg, "colors"),
        texture_size=_get_int(cfg, "texture_size", 64),
        tile_period=_get_float(cfg, "tile_period", 1.0),
        epochs=_get_int(cfg, "epochs", 30),
        batch_size=_get_int(cfg, "batch_size", 8),
        lr=_get_float(cfg, "lr", 0.01),
        seed=_seed_of(cfg, args),
        weights=weights,
        transforms=transforms,
        use_projection_aug=_get_bool(cfg, "use_projection_aug", True),
        use_roa=_get_bool(cfg, "use_roa", True),
    )


def cmd_attack(cfg, args):
    attack_cfg = _attack_config(cfg, args)
    out_dir = Path(_need(cfg, "out_dir"))
    report = run_attack(attack_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_texture(out_dir, report.texture)
    write_attack_csv(out_dir / "report.csv", report)
    write_eval_csv(out_dir / "eval_pre.csv", report.pre_eval)
    write_eval_csv(out_dir / "eval_post.csv", report.post_eval)
    print(f"attack done: AP {report.pre_eval.overall_ap:.2f} -> "
          f"{report.post_eval.overall_ap:.2f}, mean valid score "
          f"{report.pre_eval.mean_valid_score:.4f} -> "
          f"{report.post_eval.mean_valid_score:.4f}")
    return 0


def cmd_eval(cfg, args):
    scenes = scenes_from_manifest(load_scene_manifest(_need(cfg, "scenes")))
    detector = load_detector(_need(cfg, "detector"))
    ntr = load_ntr(_need(cfg, "ntr"))
    texture = read_texture(_need(cfg, "texture"))
    report = evaluate_texture(texture, scenes, detector, ntr,
                              tile_period=_get_float(cfg, "tile_period", 1.0))
    write_eval_csv(_need(cfg, "out"), report)
    print(f"overall AP {report.overall_ap:.2f}, "
          f"mean valid score {report.mean_valid_score:.4f}")
    return 0


def cmd_render_preview(cfg, args):
    scenes = scenes_from_manifest(load_scene_manifest(_need(cfg, "scenes")))
    index = _get_int(cfg, "scene_index", 0)
    if not 0 <= index < len(scenes):
        raise ValueError(f"scene_index {index} out of range for {len(scenes)} scenes")
    ntr = load_ntr(_need(cfg, "ntr"))
    texture = read_texture(_need(cfg, "texture"))
    scene = scenes[index]
    x_adv = render_textured_scene(
        T.constant(texture), scene, ntr,
        tile_period=_get_float(cfg, "tile_period", 1.0),
    )
    out_dir = Path(_need(cfg, "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_png(out_dir / "preview.png",
                     np.round(np.clip(x_adv.data, 0, 1) * 255.0).astype(np.uint8))
    fileio.write_png(out_dir / "texture.png",
                     np.round(texture * 255.0).astype(np.uint8))
    print(f"wrote preview renders to {out_dir}")
    return 0


_COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train-ntr": cmd_train_ntr,
    "train-detector": cmd_train_detector,
    "extract-colors": cmd_extract_colors,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "render-preview": cmd_render_preview,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="camotex",
        description="Adversarial texture pipeline: scene generation, renderer "
                    "and detector training, texture optimization, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in _COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="key = value text file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="overrides the config file's seed")
    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors; usage maps to 1
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = _parse_config_file(args.config)
        return _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
