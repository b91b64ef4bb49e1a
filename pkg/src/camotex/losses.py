"""Attack objective: stealth, smoothness, and camouflage terms.

All three terms funnel through f_log(n) = -log(1-n), which is flat at 0 and
steep near 1, so the optimizer works hardest on whichever component is
currently worst. Inputs are clamped just below 1 because the raw formula
diverges there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .detector import iou

F_LOG_EPS = 1e-6


@dataclass
class DominantColorSet:
    """K background colors, ordered by cluster size (largest first)."""

    colors: np.ndarray  # (k, 3) in [0,1]
    source: str = ""

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.colors.ndim != 2 or self.colors.shape[1] != 3 or self.colors.shape[0] < 1:
            raise ValueError(f"colors must be (k,3) with k >= 1, got {self.colors.shape}")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("color components must lie in [0,1]")

    def to_text(self):
        lines = [" ".join(repr(float(c)) for c in row) for row in self.colors]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text, source=""):
        rows = [
            [float(tok) for tok in line.split()]
            for line in text.strip().splitlines()
            if line.strip()
        ]
        return cls(colors=np.array(rows), source=source)


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 0.25
    iou_threshold: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must lie in (0,1), got {self.iou_threshold}")


def f_log(n):
    """-log(1 - n) with the input clamped to [0, 1 - 1e-6]."""
    node = n if isinstance(n, T.TensorNode) else T.constant(n)
    clamped = T.clamp(node, 0.0, 1.0 - F_LOG_EPS)
    return T.neg(T.log(T.sub(1.0, clamped)))


def stealth_loss(detections, gt, iou_threshold=0.5):
    """f_log of the strongest valid detection score.

    A detection is valid when its box overlaps the ground truth with
    IoU > threshold; the gate is a data-level decision, so invalid boxes
    contribute exactly zero gradient. Scores are class-max times objectness.
    """
    if not detections:
        raise ValueError("stealth_loss: empty detection list")
    gt_box = gt.box if hasattr(gt, "box") else np.asarray(gt, dtype=np.float64)
    best = None
    for det in detections:
        if iou(det.box, gt_box) > iou_threshold:
            score = det.score_node()
            best = score if best is None else T.maximum(best, score)
    if best is None:
        return f_log(T.constant(0.0))
    return f_log(best)


def smooth_loss(texture):
    """Mean f_log of adjacent texel differences over the (H-1)x(W-1) interior.

    Accepts HxW or HxWxC; channels are penalized independently and summed.
    """
    node = texture if isinstance(texture, T.TensorNode) else T.constant(texture)
    if node.data.ndim == 2:
        node = T.reshape(node, node.shape + (1,))
    if node.data.ndim != 3:
        raise ValueError(f"smooth_loss: expected HxW or HxWxC texture, got {node.shape}")
    h, w, _ = node.shape
    if h < 2 or w < 2:
        raise ValueError(f"smooth_loss: texture must be at least 2x2, got {h}x{w}")
    down = T.absolute(T.sub(node[: h - 1, : w - 1, :], node[1:h, : w - 1, :]))
    right = T.absolute(T.sub(node[: h - 1, : w - 1, :], node[: h - 1, 1:w, :]))
    total = T.add(T.reduce_sum(f_log(down)), T.reduce_sum(f_log(right)))
    return T.div(total, float((h - 1) * (w - 1)))


def camouflage_loss(texture, colors):
    """Mean f_log of each texel's distance to its nearest dominant color.

    Distance is RGB Euclidean scaled by 1/sqrt(3) so it stays within
    f_log's domain; the min routes gradient only to the nearest color.
    """
    node = texture if isinstance(texture, T.TensorNode) else T.constant(texture)
    if node.data.ndim != 3 or node.shape[2] != 3:
        raise ValueError(f"camouflage_loss: expected HxWx3 texture, got {node.shape}")
    palette = colors.colors if isinstance(colors, DominantColorSet) else np.asarray(colors)
    if palette.ndim != 2 or palette.shape[0] < 1:
        raise ValueError("camouflage_loss: palette must be a non-empty (k,3) array")
    h, w, _ = node.shape
    nearest = None
    for color in palette:
        delta = T.sub(node, T.constant(np.broadcast_to(color, (h, w, 3)).copy()))
        dist = T.sqrt(T.reduce_sum(T.mul(delta, delta), axes=2))
        dist = T.div(dist, float(np.sqrt(3.0)))
        nearest = dist if nearest is None else T.minimum(nearest, dist)
    return T.reduce_mean(f_log(nearest))


def total_loss(l_atk, l_sm, l_cm, weights):
    """alpha*stealth + beta*smooth + gamma*camouflage, in one graph."""
    return T.add(
        T.add(T.mul(l_atk, weights.alpha), T.mul(l_sm, weights.beta)),
        T.mul(l_cm, weights.gamma),
    )


def _kmeans_pp_seed(pixels, k, rng):
    n = pixels.shape[0]
    centroids = np.empty((k, 3))
    first = int(rng.integers(n))
    centroids[0] = pixels[first]
    d2 = np.sum((pixels - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining pixels coincide with a chosen centroid
            centroids[i:] = centroids[0]
            return centroids
        probs = d2 / total
        choice = int(rng.choice(n, p=probs))
        centroids[i] = pixels[choice]
        d2 = np.minimum(d2, np.sum((pixels - centroids[i]) ** 2, axis=1))
    return centroids


def _lloyd(pixels, centroids, max_iters=100, tol=1e-6):
    k = centroids.shape[0]
    for _ in range(max_iters):
        d2 = np.sum((pixels[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()
        for ci in range(k):
            members = pixels[assign == ci]
            if members.size:
                new_centroids[ci] = members.mean(axis=0)
            else:
                # reseed an empty cluster at the farthest pixel
                far = int(np.argmax(np.min(d2, axis=1)))
                new_centroids[ci] = pixels[far]
        movement = np.max(np.linalg.norm(new_centroids - centroids, axis=1))
        centroids = new_centroids
        if movement < tol:
            break
    d2 = np.sum((pixels[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    return centroids, assign


def kmeans_sse(pixels, centroids):
    d2 = np.sum((pixels[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return float(np.min(d2, axis=1).sum())


def extract_dominant_colors(backgrounds, k, seed=0, masks=None, source=""):
    """Pooled K-means over background pixels, centroids sorted by cluster size.

    ``masks``, when given, selects which pixels of each image participate
    (True = include); the zero-filled object holes are excluded that way.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    chunks = []
    for i, img in enumerate(backgrounds):
        arr = np.asarray(img, dtype=np.float64).reshape(-1, 3)
        if masks is not None:
            arr = arr[np.asarray(masks[i]).reshape(-1)]
        chunks.append(arr)
    if not chunks:
        raise ValueError("extract_dominant_colors: no background images")
    pixels = np.concatenate(chunks, axis=0)
    if pixels.shape[0] == 0:
        raise ValueError("extract_dominant_colors: empty pixel set")
    if pixels.shape[0] < k:
        raise ValueError(f"need at least k={k} pixels, got {pixels.shape[0]}")

    rng = np.random.default_rng((seed, pixels.shape[0], k))
    centroids = _kmeans_pp_seed(pixels, k, rng)
    centroids, assign = _lloyd(pixels, centroids)
    sizes = np.bincount(assign, minlength=k)
    order = np.argsort(-sizes, kind="stable")
    return DominantColorSet(colors=np.clip(centroids[order], 0.0, 1.0), source=source)
