"""Brute-force oracles and finite-difference checking for the test suite.

Nothing here calls the autodiff or the vectorized kernels under test; the
oracles are plain Python loops over numpy scalars.
"""

from __future__ import annotations

import math

import numpy as np

from tokenlearner import ops
from tokenlearner.tensor import Tensor, grad


# ------------------------------------------------------------------ oracles

def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_conv3x3(x, kernel, bias):
    h, w, cin = x.shape
    cout = kernel.shape[3]
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for co in range(cout):
                s = bias[co]
                for dy in range(3):
                    for dx in range(3):
                        y, xx = i + dy - 1, j + dx - 1
                        if 0 <= y < h and 0 <= xx < w:
                            for ci in range(cin):
                                s += x[y, xx, ci] * kernel[dy, dx, ci, co]
                out[i, j, co] = s
    return out


def scalar_sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_gelu(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def loop_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def loop_layer_norm(x, scale, bias, eps=1e-6):
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        mu = sum(x[i]) / len(x[i])
        var = sum((v - mu) ** 2 for v in x[i]) / len(x[i])
        for c in range(x.shape[1]):
            out[i, c] = (x[i, c] - mu) / math.sqrt(var + eps) * scale[c] + bias[c]
    return out


def loop_dense(x, weight, bias):
    return loop_matmul(x, weight) + bias


def loop_mhsa(x, p, heads):
    """Per-head loop: softmax(q k^T / sqrt(d)) v, concatenated, projected."""
    n, c = x.shape
    d = c // heads
    q = loop_dense(x, p["wq"], p["bq"])
    k = loop_dense(x, p["wk"], p["bk"])
    v = loop_dense(x, p["wv"], p["bv"])
    cat = np.zeros((n, c))
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        for i in range(n):
            logits = [sum(q[i, cols][t] * k[j, cols][t] for t in range(d)) / math.sqrt(d) for j in range(n)]
            a = loop_softmax(logits)
            for t in range(d):
                cat[i, h * d + t] = sum(a[j] * v[j, cols][t] for j in range(n))
    return loop_dense(cat, p["wo"], p["bo"])


def loop_vector_attention(z, p):
    """y_i = sum_j softmax_j(g(q_i * k_j))_c * v_j[c], channel by channel."""
    n, c = z.shape
    q = loop_dense(z, p["fq/weight"], p["fq/bias"])
    k = loop_dense(z, p["fk/weight"], p["fk/bias"])
    v = loop_dense(z, p["fv/weight"], p["fv/bias"])
    d = q.shape[1]
    logits = np.zeros((n, n, c))
    for i in range(n):
        for j in range(n):
            prod = np.array([q[i, t] * k[j, t] for t in range(d)])
            if "gproj/weight" in p:
                logits[i, j] = loop_dense(prod[None, :], p["gproj/weight"], p["gproj/bias"])[0]
            else:
                logits[i, j] = prod
    y = np.zeros((n, c))
    for i in range(n):
        for ch in range(c):
            a = loop_softmax([logits[i, j, ch] for j in range(n)])
            y[i, ch] = sum(a[j] * v[j, ch] for j in range(n))
    return y


def loop_weighted_tokens(x, maps):
    """z_i = (1/HW) sum_p maps[p, i] * x[p, :]."""
    h, w, c = x.shape
    s = maps.shape[-1]
    z = np.zeros((s, c))
    for i in range(s):
        for r in range(h):
            for col in range(w):
                for ch in range(c):
                    z[i, ch] += maps[r, col, i] * x[r, col, ch]
    return z / (h * w)


def loop_fuse(y_t, x_res, beta_w, beta_b):
    h, w, c = x_res.shape
    s = y_t.shape[0]
    out = np.zeros_like(x_res)
    for r in range(h):
        for col in range(w):
            pre = [sum(x_res[r, col, ch] * beta_w[ch, k] for ch in range(c)) + beta_b[k] for k in range(s)]
            bw = [scalar_sigmoid(v) for v in pre]
            for ch in range(c):
                out[r, col, ch] = sum(bw[k] * y_t[k, ch] for k in range(s)) + x_res[r, col, ch]
    return out


def loop_mix(y, m):
    n, c = y.shape
    out = np.zeros_like(y)
    for ch in range(c):
        for j in range(n):
            out[j, ch] = sum(y[i, ch] * m[i, j] for i in range(n))
    return out


def cell_means(x, rows, cols):
    h, w, c = x.shape
    ch_, cw = h // rows, w // cols
    out = []
    for r in range(rows):
        for q in range(cols):
            cell = [x[r * ch_ + a, q * cw + b] for a in range(ch_) for b in range(cw)]
            out.append(np.sum(cell, axis=0) / len(cell))
    return np.array(out)


# ------------------------------------------------------- finite differences

GRAD_FLOOR = 1e-3


def rel_error(analytic, numeric, floor=GRAD_FLOOR) -> float:
    """Max abs difference over the larger gradient magnitude in the tensor.

    The denominator never drops below ``floor``: a tensor whose gradient is
    identically ~0 (say, a key bias under softmax shift invariance) is judged
    on absolute error, since central differences carry ~1e-10 roundoff on O(10) losses.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def projection_loss(out: Tensor, r: np.ndarray) -> Tensor:
    """sum(out * R) for a fixed random R, so every output entry matters."""
    return ops.sum(ops.hadamard(out, r))


def check_function(fn, arrays, h=1e-5, max_entries=None, rng=None):
    """Max relative error between autodiff and central differences for ``fn(*tensors)``."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = [g.data for g in grad(fn(*tensors), tensors)]
    worst = 0.0
    for k, base in enumerate(arrays):
        base = np.asarray(base, dtype=np.float64)
        numeric = np.zeros_like(base)
        flat_idx = _sample(base.size, max_entries, rng)
        for idx in flat_idx:
            vals = [np.asarray(a, dtype=np.float64) for a in arrays]
            plus, minus = base.copy().reshape(-1), base.copy().reshape(-1)
            plus[idx] += h
            minus[idx] -= h
            vals[k] = plus.reshape(base.shape)
            fp = fn(*[Tensor(v) for v in vals]).item()
            vals[k] = minus.reshape(base.shape)
            fm = fn(*[Tensor(v) for v in vals]).item()
            numeric.reshape(-1)[idx] = (fp - fm) / (2 * h)
        worst = max(worst, rel_error(analytic[k].reshape(-1)[flat_idx], numeric.reshape(-1)[flat_idx]))
    return worst


def check_module(module, loss_fn, h=1e-5, max_entries=None, rng=None):
    """Like :func:`check_function` over every parameter of ``module``.

    ``loss_fn()`` must read the module's current parameters.
    """
    state = {k: np.array(v, dtype=np.float64) for k, v in module.state_dict().items()}
    params = list(module.named_parameters().values())
    analytic = dict(zip(module.named_parameters(), (g.data for g in grad(loss_fn(), params))))
    worst = {}
    try:
        for name, base in state.items():
            flat_idx = _sample(base.size, max_entries, rng)
            numeric = []
            for idx in flat_idx:
                vals = []
                for sign in (1, -1):
                    pert = base.copy().reshape(-1)
                    pert[idx] += sign * h
                    module.load_state({name: pert.reshape(base.shape)}, strict=False)
                    vals.append(loss_fn().item())
                numeric.append((vals[0] - vals[1]) / (2 * h))
            module.load_state({name: base}, strict=False)
            worst[name] = rel_error(analytic[name].reshape(-1)[flat_idx], np.array(numeric))
    finally:
        module.load_state(state)
    return worst


def _sample(size, max_entries, rng):
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(size, max_entries, replace=False))
