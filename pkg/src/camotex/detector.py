"""Differentiable grid detector plus IoU and AP@0.5 evaluation.

Three strided conv stages map the image to an SxS grid; each cell emits one
sigmoid-parameterized box, an objectness score, and class probabilities.
Scores stay connected to the input pixels in the autodiff graph so an attack
can push them down; box coordinates are treated as data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .scenegen import CLASS_NAMES

SCORE_THRESHOLD = 0.30


@dataclass
class Detection:
    """One candidate box with differentiable scores attached."""

    box: np.ndarray  # (x_min, y_min, x_max, y_max) in pixels
    class_confidences: T.TensorNode  # vector over classes, each in [0,1]
    objectness: T.TensorNode  # scalar in [0,1]
    cell: tuple = (0, 0)

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate detection box {self.box}")
        conf = self.class_confidences.data
        obj = float(self.objectness.data)
        if np.any(conf < 0) or np.any(conf > 1) or not 0 <= obj <= 1:
            raise ValueError("detection scores must lie in [0,1]")

    def score_node(self):
        """Differentiable class-max times objectness."""
        return T.mul(T.reduce_max(self.class_confidences), self.objectness)

    @property
    def score(self):
        return float(np.max(self.class_confidences.data) * self.objectness.data)

    @property
    def class_id(self):
        return int(np.argmax(self.class_confidences.data))


@dataclass
class GroundTruth:
    box: np.ndarray  # pixel rectangle (x_min, y_min, x_max, y_max)
    class_id: int = 0

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate ground-truth box {self.box}")


_LAYER_PLAN = (
    # (name, kernel, in_ch, out_ch, stride)
    ("stage1", 5, 3, 16, 4),
    ("stage2", 3, 16, 24, 2),
    ("stage3", 3, 24, 32, 2),
)


class ToyDetector:
    """Anchor-free one-box-per-cell detector on an SxS grid."""

    def __init__(self, resolution=128, grid=8, num_classes=len(CLASS_NAMES), seed=0):
        stride_product = 1
        for _, _, _, _, s in _LAYER_PLAN:
            stride_product *= s
        if resolution // stride_product != grid:
            raise ValueError(
                f"resolution {resolution} with stride {stride_product} gives grid "
                f"{resolution // stride_product}, expected {grid}"
            )
        self.resolution = resolution
        self.grid = grid
        self.num_classes = num_classes
        self.head_channels = 5 + num_classes
        self.weights = {}
        for li, (name, k, cin, cout, _) in enumerate(_LAYER_PLAN):
            rng = np.random.default_rng((seed, li))
            scale = np.sqrt(2.0 / (k * k * cin))
            self.weights[f"{name}.kernel"] = T.parameter(
                rng.standard_normal((k, k, cin, cout)) * scale
            )
            self.weights[f"{name}.bias"] = T.parameter(np.zeros(cout))
        rng = np.random.default_rng((seed, len(_LAYER_PLAN)))
        cin = _LAYER_PLAN[-1][3]
        self.weights["head.kernel"] = T.parameter(
            rng.standard_normal((1, 1, cin, self.head_channels)) * np.sqrt(1.0 / cin)
        )
        self.weights["head.bias"] = T.parameter(np.zeros(self.head_channels))

    def parameters(self):
        return list(self.weights.values())

    def state_arrays(self):
        return {name: node.data.copy() for name, node in self.weights.items()}

    def load_state(self, arrays):
        for name, node in self.weights.items():
            if name not in arrays:
                raise ValueError(f"checkpoint missing weight {name}")
            if arrays[name].shape != node.data.shape:
                raise ValueError(
                    f"weight {name}: checkpoint shape {arrays[name].shape} "
                    f"!= model shape {node.data.shape}"
                )
            node.data = arrays[name].astype(np.float64).copy()
            node.zero_grad()

    def forward(self, images):
        """[N,R,R,3] -> raw head maps [N,S,S,5+classes]."""
        if images.data.ndim != 4 or images.shape[1:3] != (self.resolution, self.resolution):
            raise ValueError(
                f"detector expects [N,{self.resolution},{self.resolution},3] input, "
                f"got shape {images.shape}"
            )
        h = images
        for name, _, _, _, stride in _LAYER_PLAN:
            h = T.conv2d(
                h, self.weights[f"{name}.kernel"], stride=stride, padding="same",
                bias=self.weights[f"{name}.bias"],
            )
            h = T.leaky_relu(h, alpha=0.1)
        return T.conv2d(
            h, self.weights["head.kernel"], stride=1, padding="same",
            bias=self.weights["head.bias"],
        )


def decode_boxes(head_data, resolution, grid):
    """Pixel boxes from raw head values (plain data, no gradients)."""
    cell = resolution / grid
    boxes = np.zeros((grid, grid, 4))
    s = 1.0 / (1.0 + np.exp(-head_data[..., :4]))
    for i in range(grid):
        for j in range(grid):
            sx, sy, sw, sh = s[i, j]
            cx = (j + sx) * cell
            cy = (i + sy) * cell
            w = max(sw * resolution, 1e-6)
            h = max(sh * resolution, 1e-6)
            boxes[i, j] = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
    return boxes


def detect(model, image):
    """One Detection per grid cell; scores differentiable w.r.t. the image."""
    node = image if isinstance(image, T.TensorNode) else T.constant(image)
    if node.data.ndim == 3:
        node = T.reshape(node, (1,) + node.shape)
    head = model.forward(node)
    S = model.grid
    boxes = decode_boxes(head.data[0], model.resolution, S)
    obj_map = T.sigmoid(head[0, :, :, 4])
    cls_map = T.softmax(head[0, :, :, 5:], axis=-1)
    detections = []
    for i in range(S):
        for j in range(S):
            detections.append(
                Detection(
                    box=boxes[i, j],
                    class_confidences=cls_map[i, j],
                    objectness=obj_map[i, j],
                    cell=(i, j),
                )
            )
    return detections


def filter_detections(detections, threshold=SCORE_THRESHOLD):
    """Evaluation-time score cut; attack code never applies this."""
    return [d for d in detections if d.score >= threshold]


def iou(a, b):
    """Intersection over union of two (x0,y0,x1,y1) rectangles."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


def average_precision_50(detections_per_image, gts_per_image, iou_threshold=0.5):
    """Pooled AP: greedy match by descending score, all-point interpolation.

    ``detections_per_image``: per image, a list of (box, score).
    ``gts_per_image``: per image, a list of boxes.
    """
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    total_gt = sum(len(g) for g in gts_per_image)
    if total_gt == 0:
        raise ValueError("average_precision_50: no ground-truth boxes")

    pool = []
    for img_idx, dets in enumerate(detections_per_image):
        for det_idx, (box, score) in enumerate(dets):
            pool.append((-float(score), img_idx, det_idx, np.asarray(box, dtype=np.float64)))
    pool.sort(key=lambda rec: rec[:3])  # deterministic under score ties

    matched = [set() for _ in gts_per_image]
    tp_flags = []
    for neg_score, img_idx, _, box in pool:
        gts = gts_per_image[img_idx]
        best_iou, best_gt = 0.0, None
        for gi, gt_box in enumerate(gts):
            if gi in matched[img_idx]:
                continue
            v = iou(box, gt_box)
            if v > best_iou:
                best_iou, best_gt = v, gi
        if best_gt is not None and best_iou >= iou_threshold:
            matched[img_idx].add(best_gt)
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    if not tp_flags:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum([not f for f in tp_flags])
    recall = tp_cum / total_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # Monotone envelope from the right, then area under recall steps.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


@dataclass
class DetectorTrainReport:
    epoch_losses: list = field(default_factory=list)
    sample_count: int = 0


def _bce(pred, target_mask):
    p = T.clamp(pred, 1e-7, 1.0 - 1e-7)
    pos = T.mul(T.constant(target_mask), T.log(p))
    neg_mask = 1.0 - target_mask
    neg = T.mul(T.constant(neg_mask), T.log(T.sub(1.0, p)))
    return T.neg(T.reduce_mean(T.add(pos, neg)))


def detection_loss(model, images_node, target_boxes, target_classes):
    """Composite loss: box MSE at the responsible cell, objectness BCE, class CE.

    ``target_boxes``: (N,4) normalized (cx, cy, w, h) in [0,1].
    ``target_classes``: (N,) integer class ids; id -1 marks a background-only
    image with no object, which trains the objectness head toward zero
    everywhere and contributes nothing to the box and class terms.
    """
    head = model.forward(images_node)
    n = head.shape[0]
    S = model.grid

    box_pred = T.sigmoid(head[:, :, :, 0:4])
    obj_pred = T.sigmoid(head[:, :, :, 4])
    cls_pred = T.softmax(head[:, :, :, 5:], axis=-1)

    resp = np.zeros((n, S, S))
    box_target = np.zeros((n, S, S, 4))
    cls_mask = np.zeros((n, S, S, model.num_classes))
    for bi in range(n):
        if target_classes[bi] < 0:
            continue
        cx, cy, w, h = target_boxes[bi]
        j = min(int(cx * S), S - 1)
        i = min(int(cy * S), S - 1)
        resp[bi, i, j] = 1.0
        box_target[bi, i, j] = (cx * S - j, cy * S - i, w, h)
        cls_mask[bi, i, j, int(target_classes[bi])] = 1.0

    diff = T.sub(box_pred, T.constant(box_target))
    box_loss = T.div(
        T.reduce_sum(T.mul(T.mul(diff, diff), T.constant(np.repeat(resp[..., None], 4, axis=-1)))),
        float(n),
    )
    obj_loss = _bce(obj_pred, resp)
    cls_loss = T.div(
        T.neg(T.reduce_sum(T.mul(T.log(T.clamp(cls_pred, 1e-7, 1.0)), T.constant(cls_mask)))),
        float(n),
    )
    return T.add(T.add(T.mul(box_loss, 5.0), obj_loss), cls_loss)


def scene_targets(scenes):
    """Normalized gt boxes and class ids straight from scene masks."""
    from .scenegen import bounding_box

    boxes = np.array([bounding_box(s.mask) for s in scenes])
    classes = np.array([CLASS_NAMES.index(s.obj.class_name) for s in scenes])
    return boxes, classes


def train_toy_detector(model, scenes, epochs=30, batch_size=8, lr=0.01, seed=0,
                       transforms=None, augment_prob=0.5, negatives=None):
    """Adam on the composite detection loss over rendered scenes.

    With ``transforms`` (a DigitalTransformSet) each sample trains, with
    probability ``augment_prob``, under a fresh scale/shift/color draw with
    its target box mapped through the same draw; the mix keeps native-render
    accuracy while the detector also learns rescaled and recolored inputs.
    ``negatives`` adds background-only images (class id -1): without them the
    objectness head never sees an object-free frame and drifts toward
    shape-only cues that ignore surface appearance.
    """
    from .augment import roa

    if not scenes:
        raise ValueError("train_toy_detector: empty dataset")
    boxes, classes = scene_targets(scenes)
    if len(set(classes.tolist())) < 2:
        warnings.warn("single-class dataset: class head is degenerate", stacklevel=2)
    images = np.stack([s.x_ref for s in scenes])
    pixel_boxes = np.array([gt_from_scene(s).box for s in scenes])
    if negatives is not None and len(negatives):
        neg = np.stack([np.asarray(im, dtype=np.float64) for im in negatives])
        if neg.shape[1:] != images.shape[1:]:
            raise ValueError(
                f"negatives must match the scene shape {images.shape[1:]}, got {neg.shape[1:]}"
            )
        images = np.concatenate([images, neg])
        boxes = np.concatenate([boxes, np.zeros((len(neg), 4))])
        classes = np.concatenate([classes, np.full(len(neg), -1, dtype=classes.dtype)])
        pixel_boxes = np.concatenate([pixel_boxes, np.zeros((len(neg), 4))])
    resolution = images.shape[1]

    def augmented(idx, epoch):
        batch_images, batch_boxes = [], []
        for si in idx:
            rng = np.random.default_rng((seed, epoch, int(si)))
            if rng.uniform() >= augment_prob:
                batch_images.append(images[si])
                batch_boxes.append(boxes[si])
                continue
            node, record = roa(T.constant(images[si]), transforms, rng)
            batch_images.append(node.data)
            if classes[si] < 0:
                batch_boxes.append(boxes[si])
                continue
            x0, y0, x1, y1 = record.transform_box(pixel_boxes[si])
            # heavy downscales can pinch a small box flat; keep one pixel
            # so the responsible cell stays defined
            x1, y1 = max(x1, x0 + 1.0), max(y1, y0 + 1.0)
            batch_boxes.append([(x0 + x1) / 2 / resolution,
                                (y0 + y1) / 2 / resolution,
                                (x1 - x0) / resolution,
                                (y1 - y0) / resolution])
        return np.stack(batch_images), np.array(batch_boxes)

    params = model.parameters()
    states = [T.AdamState.for_param(p, lr=lr) for p in params]
    report = DetectorTrainReport(sample_count=len(images))
    for epoch in range(epochs):
        rng = np.random.default_rng((seed, epoch))
        order = rng.permutation(len(images))
        epoch_loss = 0.0
        batches = 0
        for start in range(0, len(images), batch_size):
            idx = order[start : start + batch_size]
            if transforms is None:
                batch_images, batch_boxes = images[idx], boxes[idx]
            else:
                batch_images, batch_boxes = augmented(idx, epoch)
            loss = detection_loss(
                model, T.constant(batch_images), batch_boxes, classes[idx]
            )
            for p in params:
                p.zero_grad()
            loss.backward()
            for p, st in zip(params, states):
                T.adam_step(p, st)
            epoch_loss += loss.item()
            batches += 1
        report.epoch_losses.append(epoch_loss / batches)
    return report


def gt_from_scene(scene):
    """Pixel-space GroundTruth from the scene's object mask."""
    from .scenegen import bounding_box

    cx, cy, w, h = bounding_box(scene.mask)
    r = scene.resolution
    return GroundTruth(
        box=np.array([(cx - w / 2) * r, (cy - h / 2) * r, (cx + w / 2) * r, (cy + h / 2) * r]),
        class_id=CLASS_NAMES.index(scene.obj.class_name),
    )
