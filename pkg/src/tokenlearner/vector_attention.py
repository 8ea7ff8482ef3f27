"""Pairwise vector attention: one attention map per channel instead of per head."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import DimensionError
from .layers import Dense, Module
from .tensor import Tensor, as_tensor


class VectorAttention(Module):
    """``y_i = sum_j softmax_j(g(q_i * k_j)) * v_j`` with channel-wise softmax.

    Query and key projections have width ``dim``. When ``dim`` equals the token
    width the mixing projection ``g`` is the identity and no parameters are
    created for it; otherwise ``gproj`` maps ``dim`` back to the value width.
    Logits are not scaled.
    """

    def __init__(self, width: int, rng: np.random.Generator, dim: int | None = None, dtype=np.float64):
        super().__init__()
        self.width = width
        self.dim = width if dim is None else dim
        self.fq = self.add_child("fq", Dense(width, self.dim, rng, dtype))
        self.fk = self.add_child("fk", Dense(width, self.dim, rng, dtype))
        self.fv = self.add_child("fv", Dense(width, width, rng, dtype))
        self.gproj = None
        if self.dim != width:
            self.gproj = self.add_child("gproj", Dense(self.dim, width, rng, dtype))

    def attention(self, z) -> Tensor:
        """The ``[..., N, N, C]`` attention tensor, normalized over the key axis."""
        z = as_tensor(z)
        if z.shape[-1] != self.width:
            raise DimensionError(f"vector attention: token width {z.shape[-1]} != {self.width}")
        q = self.fq(z)
        k = self.fk(z)
        lead, n = q.shape[:-2], q.shape[-2]
        qi = ops.reshape(q, lead + (n, 1, self.dim))
        kj = ops.reshape(k, lead + (1, n, self.dim))
        logits = ops.hadamard(qi, kj)
        if self.gproj is not None:
            logits = self.gproj(logits)
        return ops.softmax(logits, axis=-2)

    def __call__(self, z) -> Tensor:
        z = as_tensor(z)
        a = self.attention(z)
        v = self.fv(z)
        vj = ops.reshape(v, v.shape[:-2] + (1,) + v.shape[-2:])
        return ops.sum(ops.hadamard(a, vj), axis=-2)


def vector_attention(z, layer: VectorAttention) -> Tensor:
    return layer(z)
