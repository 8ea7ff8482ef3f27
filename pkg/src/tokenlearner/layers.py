"""Transformer building blocks: dense, layer norm, MHSA, blocks, patch embedding."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .errors import CheckpointError, ConfigError, DimensionError
from .tensor import Tensor, as_tensor

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float64) -> np.ndarray:
    """Normal(0, std^2) truncated to two standard deviations, by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


class Module:
    """Owns named parameter tensors and child modules.

    Parameters are immutable tensors; training swaps in new ones through
    :meth:`load_state`. Names are slash-joined paths such as ``block3/mhsa/wq``.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_child(self, name: str, module: Module) -> Module:
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.params.items()}
        for cname, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{cname}/"))
        return out

    def num_params(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Replace parameters by name. Nothing is assigned unless every entry checks out.

        ``strict`` also requires the names to match exactly in both directions.
        """
        own = self.named_parameters()
        bad = sorted(n for n, v in state.items() if n in own and tuple(np.shape(v)) != own[n].shape)
        problems = [f"{n}: expected {own[n].shape}, got {tuple(np.shape(state[n]))}" for n in bad]
        if strict:
            problems += [f"{n}: missing" for n in sorted(set(own) - set(state))]
            problems += [f"{n}: unexpected" for n in sorted(set(state) - set(own))]
        if problems:
            raise CheckpointError("parameter mismatch: " + "; ".join(problems))
        for name, value in state.items():
            if name in own:
                self._assign(name.split("/"), np.asarray(value, dtype=own[name].dtype))

    def _assign(self, path: list[str], value: np.ndarray) -> None:
        if len(path) == 1:
            self.params[path[0]] = Tensor(value, requires_grad=True, name=path[0])
        else:
            self.children[path[0]]._assign(path[1:], value)


class Dense(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.add_param("weight", trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.add_param("bias", np.zeros(d_out, dtype=dtype))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"dense: input width {x.shape[-1]} != {self.d_in}")
        if x.ndim == 1:
            return ops.reshape(self(ops.reshape(x, (1, -1))), (-1,))
        return ops.matmul(x, self.params["weight"]) + self.params["bias"]


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float64):
        super().__init__()
        self.add_param("scale", np.ones(width, dtype=dtype))
        self.add_param("bias", np.zeros(width, dtype=dtype))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.params["scale"], self.params["bias"])


class Mhsa(Module):
    """Multi-head attention with fused per-head projections.

    Head ``h`` owns columns ``h*d_h:(h+1)*d_h`` of ``wq``, ``wk`` and ``wv``.
    Passing ``context`` turns it into cross-attention (queries from ``x``).
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads", "heads")
        self.width, self.heads, self.head_dim = width, heads, width // heads
        for name in ("q", "k", "v", "o"):
            self.add_param(f"w{name}", trunc_normal(rng, (width, width), dtype=dtype))
            self.add_param(f"b{name}", np.zeros(width, dtype=dtype))

    def _split(self, t: Tensor) -> Tensor:
        # [..., N, C] -> [..., h, N, d_h]
        lead = t.shape[:-2]
        t = ops.reshape(t, lead + (t.shape[-2], self.heads, self.head_dim))
        return ops.swapaxes(t, -3, -2)

    def _proj(self, x: Tensor, name: str) -> Tensor:
        return ops.matmul(x, self.params["w" + name]) + self.params["b" + name]

    def attention_weights(self, x, context=None) -> Tensor:
        x = as_tensor(x)
        ctx = x if context is None else as_tensor(context)
        for t in (x, ctx):
            if t.shape[-1] != self.width:
                raise DimensionError(f"mhsa: token width {t.shape[-1]} != layer width {self.width}")
        q = self._split(self._proj(x, "q"))
        k = self._split(self._proj(ctx, "k"))
        logits = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.head_dim))
        return ops.softmax(logits, axis=-1)

    def __call__(self, x, context=None) -> Tensor:
        x = as_tensor(x)
        ctx = x if context is None else as_tensor(context)
        attn = self.attention_weights(x, ctx)
        v = self._split(self._proj(ctx, "v"))
        y = ops.swapaxes(ops.matmul(attn, v), -3, -2)
        y = ops.reshape(y, y.shape[:-2] + (self.width,))
        return self._proj(y, "o")


def mhsa_forward(tokens, layer: Mhsa) -> Tensor:
    return layer(tokens)


class Mlp(Module):
    def __init__(self, width: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.fc1 = self.add_child("fc1", Dense(width, hidden, rng, dtype))
        self.fc2 = self.add_child("fc2", Dense(hidden, width, rng, dtype))

    def __call__(self, x) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 attention: str = "mhsa", dtype=np.float64):
        super().__init__()
        self.width = width
        self.ln1 = self.add_child("ln1", LayerNorm(width, dtype))
        if attention == "mhsa":
            self.attn = self.add_child("mhsa", Mhsa(width, heads, rng, dtype))
        elif attention == "vector":
            from .vector_attention import VectorAttention
            self.attn = self.add_child("vattn", VectorAttention(width, rng, dtype=dtype))
        else:
            raise ConfigError(f"unknown attention kind {attention!r}", "block_attention")
        self.ln2 = self.add_child("ln2", LayerNorm(width, dtype))
        self.mlp = self.add_child("mlp", Mlp(width, mlp_ratio * width, rng, dtype))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


def transformer_block_forward(tokens, block: TransformerBlock) -> Tensor:
    return block(tokens)


class PatchEmbed(Module):
    """Split ``[B, T, H, W, Cin]`` into ``p x p x t_p`` patches, project, add positions.

    Returns the spatial grid ``[B, T', h, w, C]``; :func:`patch_embed` flattens it.
    """

    def __init__(self, height: int, width: int, frames: int, channels: int, patch: int,
                 tubelet: int, dim: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if height % patch or width % patch:
            raise ConfigError(f"input {height}x{width} not divisible by patch size {patch}", "patch.size")
        if frames % tubelet:
            raise ConfigError(f"{frames} frames not divisible by tubelet depth {tubelet}",
                              "patch.tubelet_depth")
        self.patch, self.tubelet, self.channels = patch, tubelet, channels
        self.grid = (frames // tubelet, height // patch, width // patch)
        self.num_tokens = int(np.prod(self.grid))
        self.proj = self.add_child("proj", Dense(patch * patch * tubelet * channels, dim, rng, dtype))
        pos = (rng.standard_normal((self.num_tokens, dim)) * INIT_STD).astype(dtype)
        self.add_param("pos", pos)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 5:
            raise DimensionError(f"patch embed expects [B, T, H, W, C], got {x.shape}")
        b, t, h, w, c = x.shape
        tp, p = self.tubelet, self.patch
        if t % tp or h % p or w % p:
            raise ConfigError(f"input {t}x{h}x{w} not divisible into {tp}x{p}x{p} patches", "patch")
        if (t // tp, h // p, w // p) != self.grid or c != self.channels:
            raise DimensionError(f"input {x.shape[1:]} does not match embedding grid {self.grid}")
        gt, gh, gw = self.grid
        x = ops.reshape(x, (b, gt, tp, gh, p, gw, p, c))
        x = ops.transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
        x = ops.reshape(x, (b, gt, gh, gw, tp * p * p * c))
        pos = ops.reshape(self.params["pos"], self.grid + (-1,))
        return self.proj(x) + pos


def patch_embed(x, embed: PatchEmbed) -> Tensor:
    """Tokens ``[B, N, C]`` for a ``[B, T, H, W, Cin]`` batch."""
    grid = embed(x)
    return ops.reshape(grid, (grid.shape[0], embed.num_tokens, grid.shape[-1]))


class ClassifierHead(Module):
    """Layer norm, average over tokens, dense to logits."""

    def __init__(self, width: int, classes: int, rng, dtype=np.float64):
        super().__init__()
        self.norm = self.add_child("ln", LayerNorm(width, dtype))
        self.dense = self.add_child("dense", Dense(width, classes, rng, dtype))

    def __call__(self, tokens) -> Tensor:
        return self.dense(ops.mean(self.norm(tokens), axis=-2))
