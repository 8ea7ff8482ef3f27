"""Adaptive tokenization by spatial attention, plus the fixed alternatives it is compared to.

Every tokenizer maps a feature grid ``[..., H, W, C]`` to ``[..., S, C]``.
"""

from __future__ import annotations

import re
import warnings
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .layers import Dense, Module, trunc_normal
from .tensor import Tensor, as_tensor

VARIANTS = ("conv4", "mlp")
ALT_KINDS = ("fixed_grid", "direct_dense", "pool_mlp")


class Conv3x3(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.add_param("kernel", trunc_normal(rng, (3, 3, cin, cout), dtype=dtype))
        self.add_param("bias", np.zeros(cout, dtype=dtype))

    def __call__(self, x) -> Tensor:
        return ops.conv2d_3x3(x, self.params["kernel"], self.params["bias"])


class TokenLearnerLayer(Module):
    """Learns ``tokens`` weight maps over the grid and pools the input under each.

    ``conv4`` computes the map logits with four 3x3 convolutions of width
    ``tokens`` (gelu between them); ``mlp`` applies a two-layer gelu MLP to
    every pixel independently. A sigmoid turns logits into weights.
    """

    has_maps = True

    def __init__(self, width: int, tokens: int = 8, variant: str = "conv4",
                 rng: np.random.Generator | None = None, hidden: int | None = None, dtype=np.float64):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}", "tokenlearner.variant")
        if tokens < 1:
            raise ConfigError("token count must be positive", "tokenlearner.tokens")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width, self.tokens, self.variant = width, tokens, variant
        if variant == "conv4":
            self.convs = [self.add_child(f"conv{i}", Conv3x3(width if i == 0 else tokens, tokens, rng, dtype))
                          for i in range(4)]
        else:
            self.hidden = hidden if hidden is not None else max(tokens, width // 2)
            self.fc1 = self.add_child("fc1", Dense(width, self.hidden, rng, dtype))
            self.fc2 = self.add_child("fc2", Dense(self.hidden, tokens, rng, dtype))

    def logits(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim < 3:
            raise DimensionError(f"tokenlearner expects [..., H, W, C], got {x.shape}")
        if x.shape[-1] != self.width:
            raise DimensionError(f"tokenlearner: input channels {x.shape[-1]} != {self.width}")
        if self.variant == "mlp":
            return self.fc2(ops.gelu(self.fc1(x)))
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < 3:
                h = ops.gelu(h)
        return h

    def weight_maps(self, x) -> Tensor:
        """Sigmoid weight maps ``[..., H, W, S]``, all entries in (0, 1)."""
        return ops.sigmoid(self.logits(x))

    def __call__(self, x) -> Tensor:
        return self.tokens_and_maps(x)[0]

    def tokens_and_maps(self, x) -> tuple[Tensor, Tensor]:
        x = as_tensor(x)
        h, w = x.shape[-3], x.shape[-2]
        if self.tokens >= h * w:
            warnings.warn(f"{self.tokens} tokens from a {h}x{w} grid does not reduce the token count",
                          stacklevel=2)
        maps = self.weight_maps(x)
        lead = x.shape[:-3]
        flat_maps = ops.reshape(maps, lead + (h * w, self.tokens))
        flat_x = ops.reshape(x, lead + (h * w, self.width))
        # z_i = mean_p(w_i[p] * x[p]) for all i at once
        tokens = ops.scale(ops.matmul(ops.swapaxes(flat_maps, -1, -2), flat_x), 1.0 / (h * w))
        return tokens, maps


def learn_tokens(x, layer) -> Tensor:
    """``[..., H, W, C]`` -> ``[..., S, C]``."""
    return layer(x)


def learn_tokens_video(x, layer) -> Tensor:
    """``[..., T, H, W, C]`` -> ``[..., T*S, C]``, frame 0's tokens first."""
    x = as_tensor(x)
    if x.ndim < 4:
        raise DimensionError(f"video input must be [..., T, H, W, C], got {x.shape}")
    z = layer(x)
    return ops.reshape(z, z.shape[:-3] + (z.shape[-3] * z.shape[-2], z.shape[-1]))


def grid_factors(tokens: int) -> tuple[int, int]:
    """The most nearly square ``(rows, cols)`` with ``rows * cols == tokens``, rows <= cols."""
    rows = int(np.floor(np.sqrt(tokens)))
    while tokens % rows:
        rows -= 1
    return rows, tokens // rows


class AltTokenizer(Module):
    """Tokenizers without spatial attention.

    ``fixed_grid`` averages rectangular cells, ``direct_dense`` maps the whole
    flattened frame through one dense layer, and ``pool_mlp`` averages the
    frame and expands the mean with an MLP.
    """

    has_maps = False

    def __init__(self, kind: str, width: int, tokens: int, height: int | None = None,
                 grid_width: int | None = None, rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        if kind not in ALT_KINDS:
            raise ConfigError(f"unknown tokenizer {kind!r}; expected one of {ALT_KINDS}", "tokenlearner.variant")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kind, self.width, self.tokens = kind, width, tokens
        self.height, self.grid_width = height, grid_width
        if kind == "fixed_grid":
            self.cells = grid_factors(tokens)
            if height is not None and (height % self.cells[0] or grid_width % self.cells[1]):
                raise ConfigError(f"{height}x{grid_width} grid does not split into {self.cells[0]}x"
                                  f"{self.cells[1]} cells", "tokenlearner.tokens")
        elif kind == "direct_dense":
            if height is None or grid_width is None:
                raise ConfigError("direct_dense needs the grid size", "tokenlearner")
            self.dense = self.add_child("dense", Dense(height * grid_width * width, tokens * width, rng, dtype))
        else:
            self.fc1 = self.add_child("fc1", Dense(width, width, rng, dtype))
            self.fc2 = self.add_child("fc2", Dense(width, tokens * width, rng, dtype))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim < 3 or x.shape[-1] != self.width:
            raise DimensionError(f"{self.kind}: expected [..., H, W, {self.width}], got {x.shape}")
        lead, (h, w, c) = x.shape[:-3], x.shape[-3:]
        if self.kind == "fixed_grid":
            rows, cols = self.cells
            if h % rows or w % cols:
                raise ConfigError(f"{h}x{w} grid does not split into {rows}x{cols} cells", "tokenlearner.tokens")
            cells = ops.reshape(x, lead + (rows, h // rows, cols, w // cols, c))
            means = ops.mean(cells, axis=(-4, -2))
            return ops.reshape(means, lead + (self.tokens, c))
        if self.kind == "direct_dense":
            if (h, w) != (self.height, self.grid_width):
                raise DimensionError(f"direct_dense built for {self.height}x{self.grid_width}, got {h}x{w}")
            out = self.dense(ops.reshape(x, lead + (h * w * c,)))
        else:
            out = self.fc2(ops.gelu(self.fc1(ops.spatial_mean(x))))
        return ops.reshape(out, lead + (self.tokens, c))


def alt_tokenize(x, alt: AltTokenizer) -> Tensor:
    return alt(x)


def write_pgm(path, weights: np.ndarray) -> None:
    """Binary 8-bit grayscale image of a map with values in [0, 1]."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise DimensionError(f"a PGM map must be 2-D, got {weights.shape}")
    pixels = np.clip(np.floor(weights * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError(f"{path} is not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(blob[m.end():m.end() + w * h], dtype=np.uint8).reshape(h, w)
