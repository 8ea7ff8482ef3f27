"""Differentiable primitives.

All functions take :class:`~tokenlearner.tensor.Tensor` (or array-likes, which
become constants) and return new tensors. Leading axes beyond the ones an op
documents are treated as batch axes and broadcast as numpy does.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import DimensionError
from .tensor import Tensor, as_tensor, record

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("hadamard", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), backward)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return record(x.data * s, (x,), lambda g: (g * s,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = as_tensor(x)
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * d * d)
    return record(d * cdf, (x,), lambda g: (g * (cdf + d * pdf),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return record(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    return record(np.log(d), (x,), lambda g: (g / d,))


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: sigmoid, gelu, add, hadamard, scale."""
    table = {"sigmoid": sigmoid, "gelu": gelu, "add": add, "hadamard": hadamard, "scale": scale}
    if kind not in table:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return table[kind](*args)


# ------------------------------------------------------------------ reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(y), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def spatial_mean(x) -> Tensor:
    """Average over the two axes before the trailing channel axis."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise DimensionError(f"spatial_mean needs rank >= 3 (..., H, W, C), got shape {x.shape}")
    return mean(x, axis=(-3, -2))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), backward)


def reduce(kind: str, x, **kwargs) -> Tensor:
    """Dispatch by name: spatial_mean, softmax_lastdim, sum."""
    if kind == "spatial_mean":
        return spatial_mean(x)
    if kind == "softmax_lastdim":
        return softmax(x, axis=-1)
    if kind == "sum":
        return sum(x, **kwargs)
    raise ValueError(f"unknown reduction {kind!r}")


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(a.data @ b.data, (a, b), backward)


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    # [..., H, W, C] -> [..., H, W, 9*C], window offsets (dy, dx) row-major
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    cols = [xp[..., dy:dy + h, dx:dx + w, :] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=-1)


def conv2d_3x3(x, kernel, bias) -> Tensor:
    """Stride-1 cross-correlation with one pixel of zero padding.

    ``x`` is ``[..., H, W, Cin]``, ``kernel`` is ``[3, 3, Cin, Cout]``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim < 3:
        raise DimensionError(f"conv2d_3x3: input must be [..., H, W, C], got {x.shape}")
    if kernel.shape[:2] != (3, 3) or kernel.ndim != 4:
        raise DimensionError(f"conv2d_3x3: kernel must be [3, 3, Cin, Cout], got {kernel.shape}")
    cin, cout = kernel.shape[2], kernel.shape[3]
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d_3x3: input channels {x.shape[-1]} != kernel Cin {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d_3x3: bias shape {bias.shape} != ({cout},)")
    h, w = x.shape[-3], x.shape[-2]
    cols = _im2col3x3(x.data)
    kmat = kernel.data.reshape(9 * cin, cout)
    out = cols @ kmat + bias.data

    def backward(g):
        gk = (cols.reshape(-1, 9 * cin).T @ g.reshape(-1, cout)).reshape(kernel.shape)
        gb = g.reshape(-1, cout).sum(axis=0)
        gcols = (g @ kmat.T).reshape(g.shape[:-1] + (9, cin))
        gxp = np.zeros(x.shape[:-3] + (h + 2, w + 2, cin), dtype=g.dtype)
        for k in range(9):
            dy, dx = divmod(k, 3)
            gxp[..., dy:dy + h, dx:dx + w, :] += gcols[..., k, :]
        return gxp[..., 1:h + 1, 1:w + 1, :], gk, gb

    return record(out, (x, kernel, bias), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: width {c} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record(y, (x, gamma, beta), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[B, K]`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ------------------------------------------------------------------ structural

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return record(y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    y = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return record(np.array(y), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record(y, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis=axis)
