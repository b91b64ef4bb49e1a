"""Random digital augmentation of composited images, plus projection jitter.

The geometric part resamples through fixed integer indices drawn per call,
so gradients flow through the gathered pixel values; the color part is a
plain affine map. Both are exact identities at the degenerate draws.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import ProjectionAugmentation

CANVAS_GRAY = 0.5


@dataclass
class DigitalTransformSet:
    """Ranges for the digital augmentation draws."""

    brightness_delta: float = 0.25
    contrast_range: tuple = (0.75, 1.5)
    scale_range: tuple = (0.25, 1.0)

    def __post_init__(self):
        if self.brightness_delta < 0:
            raise ValueError(f"brightness_delta must be >= 0, got {self.brightness_delta}")
        for name, (lo, hi) in (("contrast", self.contrast_range),
                               ("scale", self.scale_range)):
            if lo <= 0 or hi <= 0 or lo > hi:
                raise ValueError(f"{name}_range must be positive with lo <= hi, got ({lo}, {hi})")
        if self.scale_range[1] > 1.0:
            raise ValueError(
                f"scale_range max {self.scale_range[1]} would push content off the canvas"
            )


@dataclass
class RoaRecord:
    """One sampled augmentation, sufficient to transform boxes the same way."""

    scale: float
    new_h: int
    new_w: int
    offset_y: int
    offset_x: int
    contrast: float
    brightness: float
    height: int
    width: int

    def transform_box(self, box):
        """Map a source-image [x0,y0,x1,y1] box (end-exclusive) to the output.

        Edges follow the inverse of the nearest-neighbor index rule, so a
        rectangle resampled as an image lands on exactly these pixels.
        """
        x0, y0, x1, y1 = (float(v) for v in box)
        rw, rh = self.new_w / self.width, self.new_h / self.height
        return np.array([
            math.ceil(x0 * rw - 0.5) + self.offset_x,
            math.ceil(y0 * rh - 0.5) + self.offset_y,
            math.ceil(x1 * rw - 0.5) + self.offset_x,
            math.ceil(y1 * rh - 0.5) + self.offset_y,
        ], dtype=np.float64)


def roa(x_adv, transforms, rng):
    """Scale/translate onto a gray canvas, then jitter contrast and brightness.

    Draw order: scale, row offset, col offset, contrast, brightness. Returns
    (augmented image node, RoaRecord). The color map c*(x-0.5)+0.5+b is
    evaluated as c*x + (0.5*(1-c)+b) so c=1, b=0 adds an exact zero.
    """
    node = x_adv if isinstance(x_adv, T.TensorNode) else T.constant(x_adv)
    if node.data.ndim != 3 or node.shape[2] != 3:
        raise ValueError(f"roa: expected HxWx3 image, got shape {node.shape}")
    h, w, _ = node.shape

    scale = float(rng.uniform(*transforms.scale_range))
    new_h = max(1, int(round(scale * h)))
    new_w = max(1, int(round(scale * w)))
    if new_h > h or new_w > w:
        raise ValueError(f"scaled size {new_h}x{new_w} exceeds the {h}x{w} canvas")
    oy = int(rng.integers(0, h - new_h + 1))
    ox = int(rng.integers(0, w - new_w + 1))
    contrast = float(rng.uniform(*transforms.contrast_range))
    brightness = float(rng.uniform(-transforms.brightness_delta,
                                   transforms.brightness_delta))

    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    inside = (ii >= oy) & (ii < oy + new_h) & (jj >= ox) & (jj < ox + new_w)
    src_r = np.floor((ii - oy + 0.5) * h / new_h).astype(np.int64)
    src_c = np.floor((jj - ox + 0.5) * w / new_w).astype(np.int64)
    # the index rule stays below h mathematically; clip guards fp rounding
    rows = np.where(inside, np.minimum(src_r, h - 1), 0)
    cols = np.where(inside, np.minimum(src_c, w - 1), 0)

    gathered = T.gather_nearest(node, np.stack([rows, cols], axis=-1))
    mask3 = np.repeat(inside[..., None].astype(np.float64), 3, axis=2)
    fill = np.where(mask3 > 0, 0.0, CANVAS_GRAY)
    placed = T.add(T.mul(gathered, T.constant(mask3)), T.constant(fill))

    offset = 0.5 * (1.0 - contrast) + brightness
    out = T.clamp(T.add(T.mul(placed, contrast), offset), 0.0, 1.0)
    record = RoaRecord(
        scale=scale, new_h=new_h, new_w=new_w, offset_y=oy, offset_x=ox,
        contrast=contrast, brightness=brightness, height=h, width=w,
    )
    return out, record


def identity_transforms():
    """Degenerate ranges whose every draw is the exact identity."""
    return DigitalTransformSet(
        brightness_delta=0.0, contrast_range=(1.0, 1.0), scale_range=(1.0, 1.0)
    )


def sample_projection_aug(rng):
    """Uniform triplanar shift/scale jitter within the declared ranges."""
    return ProjectionAugmentation.sample(rng)
