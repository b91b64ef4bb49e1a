"""Minimal reverse-mode autodiff on float64 numpy arrays.

Every differentiable quantity in the toolkit (textures, renderer and
detector weights, loss values) is a TensorNode. Forward values are plain
numpy; each op records a vector-Jacobian closure so that ``backward`` on a
scalar accumulates exact gradients into every upstream node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TensorNode",
    "AdamState",
    "constant",
    "parameter",
    "elementwise",
    "reduce",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "log",
    "exp",
    "sqrt",
    "clamp",
    "relu",
    "leaky_relu",
    "sigmoid",
    "minimum",
    "maximum",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "conv2d",
    "gather_nearest",
    "concat",
    "stack",
    "reshape",
    "upsample2x",
    "softmax",
    "adam_step",
]


class TensorNode:
    """One value in the computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is allocated lazily on the
    first accumulation and has the same shape as ``data``. Repeated calls to
    ``backward`` without ``zero_grad`` keep adding into ``grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse pass from this node.

        ``seed`` defaults to ones (the node is then normally a scalar loss).
        Each call propagates a fresh seed and adds the result into the
        persistent ``grad`` of every node that requires it, so two calls
        double every gradient.
        """
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"seed shape {seed.shape} does not match node shape {self.data.shape}"
                )

        order = _toposort(self)
        acc = {id(self): seed.copy()}
        for node in order:
            g = acc.pop(id(node), None)
            if g is None:
                continue
            node.accumulate_grad(g)
            if node._vjp is None:
                continue
            contribs = node._vjp(g)
            for parent, contrib in zip(node.parents, contribs):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in acc:
                    acc[key] += contrib
                else:
                    acc[key] = contrib

    # --- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_node(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_node(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_node(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return _getitem(self, key)

    def __repr__(self):
        return f"TensorNode(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
    """Reverse topological order (root first), iterative to spare the stack."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    order.reverse()
    return order


def _as_node(x):
    return x if isinstance(x, TensorNode) else TensorNode(x)


def constant(data):
    """Node that never receives gradient."""
    return TensorNode(data, requires_grad=False)


def parameter(data):
    """Leaf node that accumulates gradient."""
    return TensorNode(data, requires_grad=True)


def _needs(*nodes):
    return any(n.requires_grad for n in nodes)


def _check_binary_shapes(a, b, op_name):
    # Only scalar-vs-tensor and equal-shape pairings are supported.
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(f"{op_name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to a scalar-shaped operand."""
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


# --- elementwise ops ----------------------------------------------------


def add(a, b):
    a, b = _as_node(a), _as_node(b)
    _check_binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return TensorNode(out_data, _needs(a, b), (a, b), vjp)


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    _check_binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return TensorNode(out_data, _needs(a, b), (a, b), vjp)


def mul(a, b):
    a, b = _as_node(a), _as_node(b)
    _check_binary_shapes(a, b, "mul")
    a_data, b_data = a.data, b.data
    out_data = a_data * b_data

    def vjp(g):
        return _reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape)

    return TensorNode(out_data, _needs(a, b), (a, b), vjp)


def div(a, b):
    a, b = _as_node(a), _as_node(b)
    _check_binary_shapes(a, b, "div")
    a_data, b_data = a.data, b.data
    out_data = a_data / b_data

    def vjp(g):
        ga = _reduce_to(g / b_data, a.shape)
        gb = _reduce_to(-g * a_data / (b_data * b_data), b.shape)
        return ga, gb

    return TensorNode(out_data, _needs(a, b), (a, b), vjp)


def neg(a):
    a = _as_node(a)
    return TensorNode(-a.data, a.requires_grad, (a,), lambda g: (-g,))


def absolute(a):
    a = _as_node(a)
    sign = np.sign(a.data)  # sign(0) = 0: subgradient at the kink
    return TensorNode(np.abs(a.data), a.requires_grad, (a,), lambda g: (g * sign,))


def log(a):
    a = _as_node(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: input has non-positive entries; clamp before taking log")
    a_data = a.data
    return TensorNode(np.log(a_data), a.requires_grad, (a,), lambda g: (g / a_data,))


def exp(a):
    a = _as_node(a)
    out_data = np.exp(a.data)
    return TensorNode(out_data, a.requires_grad, (a,), lambda g: (g * out_data,))


def sqrt(a):
    """Square root; the derivative diverges at 0 so the subgradient 0 is used there."""
    a = _as_node(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt: input has negative entries")
    out_data = np.sqrt(a.data)
    scale = np.where(out_data > 0.0, 0.5 / np.where(out_data > 0.0, out_data, 1.0), 0.0)
    return TensorNode(out_data, a.requires_grad, (a,), lambda g: (g * scale,))


def clamp(a, lo, hi):
    a = _as_node(a)
    # Gradient passes where lo <= x <= hi, saturates to zero outside.
    inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    out_data = np.clip(a.data, lo, hi)
    return TensorNode(out_data, a.requires_grad, (a,), lambda g: (g * inside,))


def relu(a):
    a = _as_node(a)
    mask = (a.data > 0.0).astype(np.float64)
    return TensorNode(a.data * mask, a.requires_grad, (a,), lambda g: (g * mask,))


def leaky_relu(a, alpha=0.1):
    a = _as_node(a)
    slope = np.where(a.data > 0.0, 1.0, alpha)
    return TensorNode(a.data * slope, a.requires_grad, (a,), lambda g: (g * slope,))


def _sigmoid_data(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_node(a)
    s = _sigmoid_data(np.atleast_1d(a.data)).reshape(a.shape)
    return TensorNode(s, a.requires_grad, (a,), lambda g: (g * s * (1.0 - s),))


def minimum(a, b):
    """Elementwise min; ties route gradient to the first argument."""
    a, b = _as_node(a), _as_node(b)
    _check_binary_shapes(a, b, "minimum")
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)
    mask = take_a.astype(np.float64)

    def vjp(g):
        return _reduce_to(g * mask, a.shape), _reduce_to(g * (1.0 - mask), b.shape)

    return TensorNode(out_data, _needs(a, b), (a, b), vjp)


def maximum(a, b):
    """Elementwise max; ties route gradient to the first argument."""
    a, b = _as_node(a), _as_node(b)
    _check_binary_shapes(a, b, "maximum")
    take_a = a.data >= b.data
    out_data = np.where(take_a, a.data, b.data)
    mask = take_a.astype(np.float64)

    def vjp(g):
        return _reduce_to(g * mask, a.shape), _reduce_to(g * (1.0 - mask), b.shape)

    return TensorNode(out_data, _needs(a, b), (a, b), vjp)


_UNARY = {
    "neg": neg,
    "abs": absolute,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "clamp": clamp,
}
_BINARY = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "min": minimum,
    "max": maximum,
}


def elementwise(op_kind, a, b=None, **kwargs):
    """Dispatch by name; binary kinds require ``b``."""
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise: {op_kind} is unary")
        return _UNARY[op_kind](a, **kwargs)
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise: {op_kind} needs two operands")
        return _BINARY[op_kind](a, b, **kwargs)
    raise ValueError(f"elementwise: unknown op_kind {op_kind!r}")


# --- reductions ---------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim for ax in axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"reduce: repeated axis in {axes}")
    return axes


def reduce_sum(a, axes=None):
    a = _as_node(a)
    axes = _norm_axes(axes, a.data.ndim)
    out_data = np.sum(a.data, axis=axes)
    in_shape = a.shape
    expand_shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(expand_shape), in_shape).copy(),)

    return TensorNode(out_data, a.requires_grad, (a,), vjp)


def reduce_mean(a, axes=None):
    a = _as_node(a)
    axes = _norm_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ValueError("reduce: mean over an empty axis")
    out_data = np.mean(a.data, axis=axes)
    in_shape = a.shape
    expand_shape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def vjp(g):
        return (np.broadcast_to(g.reshape(expand_shape), in_shape).copy() / count,)

    return TensorNode(out_data, a.requires_grad, (a,), vjp)


def reduce_max(a, axes=None):
    """Max over ``axes``; gradient goes only to the first argmax in row-major order."""
    a = _as_node(a)
    axes = _norm_axes(axes, a.data.ndim)
    if any(a.shape[i] == 0 for i in axes):
        raise ValueError("reduce: max over an empty axis")
    ndim = a.data.ndim
    kept = tuple(i for i in range(ndim) if i not in axes)
    perm = kept + axes
    moved = np.transpose(a.data, perm)
    kept_shape = moved.shape[: len(kept)]
    flat = moved.reshape(kept_shape + (-1,))
    arg = np.argmax(flat, axis=-1)  # first occurrence wins ties
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    inv_perm = np.argsort(perm)

    def vjp(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        return (np.transpose(gflat.reshape(moved.shape), inv_perm),)

    return TensorNode(out_data, a.requires_grad, (a,), vjp)


def reduce(op_kind, a, axes=None):
    if op_kind == "sum":
        return reduce_sum(a, axes)
    if op_kind == "mean":
        return reduce_mean(a, axes)
    if op_kind == "max":
        return reduce_max(a, axes)
    raise ValueError(f"reduce: unknown op_kind {op_kind!r}")


# --- structural ops -----------------------------------------------------


def reshape(a, new_shape):
    a = _as_node(a)
    old_shape = a.shape
    out_data = a.data.reshape(new_shape)
    return TensorNode(
        out_data, a.requires_grad, (a,), lambda g: (g.reshape(old_shape),)
    )


def concat(nodes, axis=0):
    nodes = [_as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("concat: empty node list")
    out_data = np.concatenate([n.data for n in nodes], axis=axis)
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return TensorNode(out_data, _needs(*nodes), tuple(nodes), vjp)


def stack(nodes, axis=0):
    nodes = [_as_node(n) for n in nodes]
    expanded = [reshape(n, n.shape[:axis] + (1,) + n.shape[axis:]) for n in nodes]
    return concat(expanded, axis=axis)


def _getitem(a, key):
    out_data = a.data[key]
    in_shape = a.shape

    def vjp(g):
        full = np.zeros(in_shape)
        full[key] = g
        return (full,)

    return TensorNode(out_data, a.requires_grad, (a,), vjp)


def upsample2x(a):
    """Nearest-neighbor 2x upsampling of an [N,H,W,C] node."""
    a = _as_node(a)
    if a.data.ndim != 4:
        raise ValueError(f"upsample2x: expected [N,H,W,C], got shape {a.shape}")
    n, h, w, c = a.shape
    out_data = np.repeat(np.repeat(a.data, 2, axis=1), 2, axis=2)

    def vjp(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return TensorNode(out_data, a.requires_grad, (a,), vjp)


def softmax(a, axis=-1):
    a = _as_node(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot),)

    return TensorNode(s, a.requires_grad, (a,), vjp)


# --- convolution --------------------------------------------------------


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        pad_h = max((oh - 1) * stride + kh - h, 0)
        pad_w = max((ow - 1) * stride + kw - w, 0)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ValueError(f"conv2d: input {h}x{w} smaller than kernel {kh}x{kw}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pad_h = pad_w = 0
    else:
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    return oh, ow, (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)


def conv2d(inp, kernel, stride=1, padding="same", bias=None):
    """Cross-correlation of [N,H,W,C] with [kh,kw,C,F], optional bias (F,).

    The per-offset accumulation keeps memory flat: one skinny matmul per
    kernel tap instead of a materialized im2col buffer.
    """
    inp, kernel = _as_node(inp), _as_node(kernel)
    if inp.data.ndim != 4:
        raise ValueError(f"conv2d: input must be [N,H,W,C], got shape {inp.shape}")
    kh, kw, kc, f = kernel.shape
    n, h, w, c = inp.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels but kernel expects {kc}")
    oh, ow, (ph0, ph1), (pw0, pw1) = _conv_geometry(h, w, kh, kw, stride, padding)

    padded = np.pad(inp.data, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    kdata = kernel.data
    out_flat = np.zeros((n * oh * ow, f))
    for di in range(kh):
        for dj in range(kw):
            window = padded[:, di : di + oh * stride : stride, dj : dj + ow * stride : stride, :]
            out_flat += window.reshape(-1, c) @ kdata[di, dj]
    if bias is not None:
        bias = _as_node(bias)
        if bias.shape != (f,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
        out_flat += bias.data
    out_data = out_flat.reshape(n, oh, ow, f)

    parents = (inp, kernel) if bias is None else (inp, kernel, bias)

    def vjp(g):
        gflat = g.reshape(-1, f)
        g_inp = None
        g_kernel = None
        if inp.requires_grad:
            gp = np.zeros_like(padded)
            for di in range(kh):
                for dj in range(kw):
                    contrib = (gflat @ kdata[di, dj].T).reshape(n, oh, ow, c)
                    gp[:, di : di + oh * stride : stride, dj : dj + ow * stride : stride, :] += contrib
            g_inp = gp[:, ph0 : ph0 + h, pw0 : pw0 + w, :]
        if kernel.requires_grad:
            g_kernel = np.zeros_like(kdata)
            for di in range(kh):
                for dj in range(kw):
                    window = padded[:, di : di + oh * stride : stride, dj : dj + ow * stride : stride, :]
                    g_kernel[di, dj] = window.reshape(-1, c).T @ gflat
        if bias is None:
            return g_inp, g_kernel
        return g_inp, g_kernel, g.sum(axis=(0, 1, 2))

    return TensorNode(out_data, _needs(*parents), parents, vjp)


# --- texture gather -----------------------------------------------------


def gather_nearest(texture, uv_indices):
    """Read texels at integer (row, col) index pairs; backward scatter-adds.

    ``uv_indices`` has shape [..., 2] and must already be wrapped into range;
    indices carry no gradient.
    """
    texture = _as_node(texture)
    if texture.data.ndim != 3:
        raise ValueError(f"gather_nearest: texture must be [H,W,3], got {texture.shape}")
    idx = np.asarray(uv_indices)
    if idx.shape[-1] != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_nearest: uv_indices must be an integer array [...,2]")
    h, w, _ = texture.shape
    rows, cols = idx[..., 0], idx[..., 1]
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise ValueError(
            f"gather_nearest: index out of range for {h}x{w} texture "
            f"(rows [{rows.min()},{rows.max()}], cols [{cols.min()},{cols.max()}])"
        )
    out_data = texture.data[rows, cols]
    tex_shape = texture.shape

    def vjp(g):
        gt = np.zeros(tex_shape)
        np.add.at(gt, (rows, cols), g)
        return (gt,)

    return TensorNode(out_data, texture.requires_grad, (texture,), vjp)


# --- Adam ---------------------------------------------------------------


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one parameter tensor."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            first_moment=np.zeros_like(param.data),
            second_moment=np.zeros_like(param.data),
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(param, state):
    """In-place bias-corrected Adam update; zeroes the gradient afterwards."""
    if param.grad is None:
        raise ValueError("adam_step: parameter has no accumulated gradient")
    g = param.grad
    state.step_count += 1
    t = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * g * g
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.grad = np.zeros_like(param.data)
    return param, state
