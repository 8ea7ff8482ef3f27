"""Token mixing and remapping of learned tokens back onto the feature grid."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, ContractError, DimensionError
from .layers import INIT_STD, Dense, LayerNorm, Mhsa, Module
from .tensor import Tensor, as_tensor

ALT_FUSERS = ("unpool", "reproject")


def tokenwise_mix(y, mix) -> Tensor:
    """Apply an ``[N, N]`` matrix across tokens, per channel: ``(y^T M)^T``."""
    y, mix = as_tensor(y), as_tensor(mix)
    if mix.ndim != 2 or mix.shape[0] != mix.shape[1] or y.ndim < 2 or y.shape[-2] != mix.shape[0]:
        raise DimensionError(f"tokenwise_mix: tokens {y.shape} vs mixing matrix {mix.shape}")
    return ops.matmul(ops.transpose(mix), y)


def remap_weights(x_residual, beta: Dense) -> Tensor:
    """Per-pixel token weights ``[..., H, W, S]`` from the residual features."""
    return ops.sigmoid(beta(x_residual))


def fuse_remap(y_t, x_residual, fuser: TokenFuserLayer) -> Tensor:
    """``out[p] = sum_s sigmoid(beta(x[p]))_s * y_t[s] + x[p]`` for one frame."""
    y_t, x_residual = as_tensor(y_t), as_tensor(x_residual)
    return _remap(y_t, x_residual, remap_weights(x_residual, fuser.beta))


def _remap(y_t: Tensor, x_residual: Tensor, weights: Tensor) -> Tensor:
    if x_residual.ndim < 3:
        raise DimensionError(f"residual must be [..., H, W, C], got {x_residual.shape}")
    if y_t.shape[-1] != x_residual.shape[-1]:
        raise DimensionError(f"token width {y_t.shape[-1]} != residual width {x_residual.shape[-1]}")
    if weights.shape[-1] != y_t.shape[-2]:
        raise DimensionError(f"{weights.shape[-1]} weight maps for {y_t.shape[-2]} tokens")
    lead = x_residual.shape[:-3]
    h, w, c = x_residual.shape[-3:]
    flat = ops.reshape(weights, weights.shape[:-3] + (h * w, weights.shape[-1]))
    out = ops.matmul(flat, y_t)
    return ops.reshape(out, lead + (h, w, c)) + x_residual


class TokenFuserLayer(Module):
    """Token-wise linear mixing over all ``S*T`` tokens, then per-frame remapping."""

    def __init__(self, width: int, tokens: int, frames: int = 1, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width, self.tokens, self.frames = width, tokens, frames
        n = tokens * frames
        self.add_param("mix", (np.eye(n) + rng.standard_normal((n, n)) * INIT_STD).astype(dtype))
        self.beta = self.add_child("beta", Dense(width, tokens, rng, dtype))

    def __call__(self, y, x_residual) -> Tensor:
        """``y``: ``[..., T*S, C]``; ``x_residual``: ``[..., T, H, W, C]``."""
        y, x_residual = as_tensor(y), as_tensor(x_residual)
        if x_residual.ndim < 4 or x_residual.shape[-4] != self.frames:
            raise DimensionError(f"residual {x_residual.shape} is not [..., {self.frames}, H, W, C]")
        mixed = tokenwise_mix(y, self.params["mix"])
        per_frame = ops.reshape(mixed, mixed.shape[:-2] + (self.frames, self.tokens, mixed.shape[-1]))
        return fuse_remap(per_frame, x_residual, self)


class AltFuser(Module):
    """Grid recovery without a fuser.

    ``unpool`` re-weights each token by the TokenLearner map it came from;
    ``reproject`` lets every pixel cross-attend to the frame's tokens.
    """

    def __init__(self, kind: str, width: int, heads: int = 1, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        super().__init__()
        if kind not in ALT_FUSERS:
            raise ConfigError(f"unknown fuser alternative {kind!r}; expected one of {ALT_FUSERS}", "tokenfuser.alt")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind, self.width = kind, width
        if kind == "reproject":
            self.ln_q = self.add_child("ln_q", LayerNorm(width, dtype))
            self.ln_kv = self.add_child("ln_kv", LayerNorm(width, dtype))
            self.attn = self.add_child("xattn", Mhsa(width, heads, rng, dtype))

    def __call__(self, y_t, x_residual, maps=None) -> Tensor:
        """``y_t``: ``[..., S, C]``; ``x_residual``: ``[..., H, W, C]``; ``maps``: ``[..., H, W, S]``."""
        y_t, x_residual = as_tensor(y_t), as_tensor(x_residual)
        if self.kind == "unpool":
            if maps is None:
                raise ContractError("unpool needs the weight maps of the paired TokenLearner call")
            return _remap(y_t, x_residual, as_tensor(maps))
        lead = x_residual.shape[:-3]
        h, w, c = x_residual.shape[-3:]
        queries = ops.reshape(self.ln_q(x_residual), lead + (h * w, c))
        out = self.attn(queries, context=self.ln_kv(y_t))
        return ops.reshape(out, lead + (h, w, c)) + x_residual


def alt_fuse(y_t, x_residual, alt: AltFuser, learner_maps=None) -> Tensor:
    return alt(y_t, x_residual, learner_maps)
