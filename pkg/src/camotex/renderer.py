"""Learned texture renderer: reference image -> per-pixel multiplier/adder maps.

The network sees only the masked reference render, so its two output maps
carry pose and lighting but know nothing about the texture; any texture is
then composited through the same per-pixel affine rule.
"""

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .scenegen import render_ground_truth

LEAK = 0.1

# (name, kernel, cin, cout, stride); decoder convs run before each upsample
_ENCODER_PLAN = (
    ("enc1", 3, 3, 16, 1),
    ("enc2", 3, 16, 24, 2),
    ("enc3", 3, 24, 32, 2),
    ("enc4", 3, 32, 32, 2),
)
_DECODER_PLAN = (
    ("dec4", 3, 32, 32),  # at 1/8 scale, then upsample + concat enc3
    ("dec3", 3, 64, 24),  # at 1/4 scale, then upsample + concat enc2
    ("dec2", 3, 48, 16),  # at 1/2 scale, then upsample + concat enc1
    ("dec1", 3, 32, 16),  # full scale
)
_HEADS = ("multiplier", "adder")


class NtrModel:
    """Four-down/four-up convolutional net with concatenation skips.

    Both heads are linear 1x1 convolutions; the multiplier head carries a
    +1 offset so a freshly initialized model composes near the identity.
    """

    def __init__(self, seed=0):
        self.weights = {}
        layers = [(n, k, ci, co) for n, k, ci, co, _ in _ENCODER_PLAN]
        layers += list(_DECODER_PLAN)
        for li, (name, k, cin, cout) in enumerate(layers):
            rng = np.random.default_rng((seed, li))
            scale = np.sqrt(2.0 / (k * k * cin))
            self.weights[f"{name}.kernel"] = T.parameter(
                rng.standard_normal((k, k, cin, cout)) * scale
            )
            self.weights[f"{name}.bias"] = T.parameter(np.zeros(cout))
        feat = _DECODER_PLAN[-1][3]
        for hi, name in enumerate(_HEADS):
            rng = np.random.default_rng((seed, len(layers) + hi))
            self.weights[f"{name}.kernel"] = T.parameter(
                rng.standard_normal((1, 1, feat, 3)) * np.sqrt(1.0 / feat)
            )
            self.weights[f"{name}.bias"] = T.parameter(np.zeros(3))

    def parameters(self):
        return list(self.weights.values())

    def parameter_count(self):
        return sum(node.data.size for node in self.weights.values())

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

    def _conv(self, x, name, stride=1):
        return T.conv2d(
            x, self.weights[f"{name}.kernel"], stride=stride,
            bias=self.weights[f"{name}.bias"],
        )

    def transformation_features(self, x_ref_m):
        """[N,H,W,3] masked reference -> (multiplier, adder), both [N,H,W,3].

        H and W must be multiples of 8: three stride-2 stages down, three
        nearest-neighbor doublings back up.
        """
        node = x_ref_m if isinstance(x_ref_m, T.TensorNode) else T.constant(x_ref_m)
        if node.data.ndim != 4 or node.shape[3] != 3:
            raise ValueError(f"expected [N,H,W,3] input, got shape {node.shape}")
        h, w = node.shape[1], node.shape[2]
        if h % 8 or w % 8 or h == 0 or w == 0:
            raise ValueError(f"spatial size must be a positive multiple of 8, got {h}x{w}")

        skips = []
        x = node
        for name, _, _, _, stride in _ENCODER_PLAN:
            x = T.leaky_relu(self._conv(x, name, stride=stride), LEAK)
            skips.append(x)
        # skips[:3] re-enter at matching resolution, deepest first
        x = T.leaky_relu(self._conv(x, "dec4"), LEAK)
        x = T.concat([T.upsample2x(x), skips[2]], axis=3)
        x = T.leaky_relu(self._conv(x, "dec3"), LEAK)
        x = T.concat([T.upsample2x(x), skips[1]], axis=3)
        x = T.leaky_relu(self._conv(x, "dec2"), LEAK)
        x = T.concat([T.upsample2x(x), skips[0]], axis=3)
        x = T.leaky_relu(self._conv(x, "dec1"), LEAK)

        multiplier = T.add(self._conv(x, "multiplier"), 1.0)
        adder = self._conv(x, "adder")
        return multiplier, adder


def ntr_compose(eta_p, multiplier, adder):
    """clamp(eta_p * multiplier + adder, 0, 1) -- the fixed composition rule."""
    eta_p = eta_p if isinstance(eta_p, T.TensorNode) else T.constant(eta_p)
    return T.clamp(T.add(T.mul(eta_p, multiplier), adder), 0.0, 1.0)


def ntr_forward(model, x_ref_m, eta_p):
    """Render a projected texture under the pose/lighting of one reference image.

    Both inputs are HxWx3; the result is the masked object render x_adv_m.
    Differentiable w.r.t. eta_p and the model weights.
    """
    ref = x_ref_m if isinstance(x_ref_m, T.TensorNode) else T.constant(x_ref_m)
    tex = eta_p if isinstance(eta_p, T.TensorNode) else T.constant(eta_p)
    if ref.data.ndim != 3 or tex.data.ndim != 3 or ref.shape != tex.shape:
        raise ValueError(
            f"x_ref_m shape {ref.shape} and eta_p shape {tex.shape} must both be HxWx3"
        )
    batched = T.reshape(ref, (1,) + ref.shape)
    multiplier, adder = model.transformation_features(batched)
    out = ntr_compose(T.reshape(tex, (1,) + tex.shape), multiplier, adder)
    return T.reshape(out, ref.shape)


def ssim(a, b):
    """Structural similarity with a dense 8x8 uniform window.

    Biased local moments, C1 = 0.01^2, C2 = 0.03^2, averaged over every
    fully-contained window and over channels. Inputs are HxW or HxWxC.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC images, got shape {a.shape}")
    win = 8
    h, w, _ = a.shape
    if h < win or w < win:
        raise ValueError(f"image {h}x{w} is smaller than the {win}x{win} window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def local_mean(x):
        views = np.lib.stride_tricks.sliding_window_view(x, (win, win), axis=(0, 1))
        return views.mean(axis=(-2, -1))

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a ** 2
    var_b = local_mean(b * b) - mu_b ** 2
    cov = local_mean(a * b) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


@dataclass
class NtrTrainReport:
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    initial_loss: float = 0.0  # full-dataset MSE before the first update
    final_loss: float = 0.0  # full-dataset MSE after the last update
    held_out_ssim: float = 0.0
    constant_baseline_ssim: float = 0.0
    train_size: int = 0
    held_out_size: int = 0

    def __post_init__(self):
        for v in (self.held_out_ssim, self.constant_baseline_ssim):
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"SSIM {v} outside [-1, 1]")


def _composite_batch(model, refs, etas, masks, backgrounds):
    multiplier, adder = model.transformation_features(T.constant(refs))
    x_adv_m = ntr_compose(T.constant(etas), multiplier, adder)
    # backgrounds already carry a zero hole on object pixels
    return T.add(T.mul(x_adv_m, T.constant(masks)), T.constant(backgrounds))


def _record_arrays(records):
    refs = np.stack([r["sample"].x_ref_m for r in records])
    etas = np.stack([r["color"] * r["sample"].mask[..., None] for r in records])
    # full 3-channel masks: the tensor ops only broadcast scalars
    masks = np.stack(
        [np.repeat(r["sample"].mask[..., None].astype(np.float64), 3, axis=2)
         for r in records]
    )
    bgs = np.stack([r["sample"].x_bg for r in records])
    targets = np.stack([r["target"] for r in records])
    return refs, etas, masks, bgs, targets


def held_out_pairs(records, count, seed):
    """(sample, random color) pairs whose colors never appear in training."""
    rng = np.random.default_rng((seed, zlib.crc32(b"ntr-held-out")))
    colors = rng.uniform(0.0, 1.0, size=(count, 3))
    samples = {id(r["sample"]): r["sample"] for r in records}
    pairs = []
    for sample in samples.values():
        for color in colors:
            pairs.append((sample, color))
    return pairs


def _evaluate_ssim(model, pairs):
    # TF maps depend only on the reference, so compute them once per sample
    tf_cache = {}
    total = 0.0
    for sample, color in pairs:
        key = id(sample)
        if key not in tf_cache:
            batched = sample.x_ref_m[None]
            mult, add = model.transformation_features(T.constant(batched))
            tf_cache[key] = (mult.data[0], add.data[0])
        mult, add = tf_cache[key]
        mask = sample.mask[..., None]
        eta_p = color * mask
        x_adv_m = np.clip(eta_p * mult + add, 0.0, 1.0)
        pred = x_adv_m * mask + sample.x_bg
        total += ssim(pred, render_ground_truth(sample, eta_p))
    return total / len(pairs)


def _constant_baseline_ssim(train_targets, pairs):
    # best input-independent predictor under MSE: the mean training target
    mean_target = train_targets.mean(axis=0)
    total = 0.0
    for sample, color in pairs:
        eta_p = color * sample.mask[..., None]
        total += ssim(mean_target, render_ground_truth(sample, eta_p))
    return total / len(pairs)


def ntr_train(model, records, epochs=20, batch_size=8, lr=0.002, seed=0,
              held_out_colors=10):
    """Fit the renderer by MSE against analytic ground-truth composites.

    Held-out SSIM is measured on ``held_out_colors`` random colors that the
    training set never contains, over the same scene poses.
    """
    if not records:
        raise ValueError("ntr_train: empty dataset")
    refs, etas, masks, bgs, targets = _record_arrays(records)
    n = refs.shape[0]
    params = model.parameters()
    adam = [T.AdamState.for_param(p, lr=lr) for p in params]

    def full_loss():
        total = 0.0
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            pred = _composite_batch(model, refs[sl], etas[sl], masks[sl], bgs[sl])
            err = pred.data - targets[sl]
            total += float((err * err).sum())
        return total / targets.size

    initial_loss = full_loss()
    epoch_losses, step_losses = [], []
    for epoch in range(epochs):
        rng = np.random.default_rng((seed, epoch))
        order = rng.permutation(n)
        epoch_total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            pred = _composite_batch(model, refs[idx], etas[idx], masks[idx], bgs[idx])
            diff = T.sub(pred, T.constant(targets[idx]))
            loss = T.reduce_mean(T.mul(diff, diff))
            for p in params:
                p.zero_grad()
            loss.backward()
            for p, state in zip(params, adam):
                T.adam_step(p, state)
            step_losses.append(loss.item())
            epoch_total += loss.item() * len(idx)
        epoch_losses.append(epoch_total / n)

    pairs = held_out_pairs(records, held_out_colors, seed)
    return NtrTrainReport(
        epoch_losses=epoch_losses,
        step_losses=step_losses,
        initial_loss=initial_loss,
        final_loss=full_loss(),
        held_out_ssim=_evaluate_ssim(model, pairs),
        constant_baseline_ssim=_constant_baseline_ssim(targets, pairs),
        train_size=n,
        held_out_size=len(pairs),
    )
