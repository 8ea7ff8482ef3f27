"""Image/video classifiers assembled from a :class:`ModelConfig`.

The layer sequence comes from :func:`plan`, a static description of every
stage and the number of tokens it produces. The cost model reads the same
plan, so its token counts always agree with what ``forward`` computes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .config import REDUCTIONS, ModelConfig
from .errors import ConfigError, DimensionError
from .fuser import AltFuser, TokenFuserLayer
from .layers import INIT_STD, ClassifierHead, Module, PatchEmbed, TransformerBlock
from .learner import AltTokenizer, TokenLearnerLayer
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class Stage:
    """One step of the forward pass.

    ``tokens`` is the token count the stage emits; ``grid`` is the
    ``(frames, rows, cols)`` spatial layout the stage reads, when it has one.
    """

    name: str
    kind: str  # embed | block | pool | tokenlearner | fuser | head
    tokens: int
    grid: tuple[int, int, int] | None = None
    info: dict = field(default_factory=dict, compare=False)


def plan(cfg: ModelConfig) -> list[Stage]:
    cfg.validate()
    frames, rows, cols = cfg.grid
    n = frames * rows * cols
    tl, red = cfg.tokenlearner, cfg.reduction
    arch = cfg.architecture
    stages = [Stage("patch_embed", "embed", n, cfg.grid)]
    pools = set(red.at_layers)
    window = REDUCTIONS[red.kind]
    learned = frames * tl.tokens

    if arch == "a" and tl.insert_after_layer == 0:
        stages.append(Stage("tokenlearner", "tokenlearner", learned, (frames, rows, cols)))
        n = learned
    for i in range(1, cfg.total_depth + 1):
        if i in pools:
            stages.append(Stage(f"pool{i}", "pool", n // window ** 2, (frames, rows, cols), {"window": window}))
            rows, cols = rows // window, cols // window
            n = frames * rows * cols
        post_tl = tl.enabled and i > tl.insert_after_layer
        attention = cfg.block_attention if post_tl else "mhsa"
        if arch == "b" and post_tl:
            stages.append(Stage(f"tokenlearner{i}", "tokenlearner", learned, (frames, rows, cols)))
            stages.append(Stage(f"block{i}", "block", learned, info={"attention": attention}))
            stages.append(Stage(f"fuser{i}", "fuser", n, (frames, rows, cols), {"alt": cfg.tokenfuser.alt}))
            continue
        stages.append(Stage(f"block{i}", "block", n, info={"attention": attention}))
        if arch == "a" and i == tl.insert_after_layer:
            stages.append(Stage("tokenlearner", "tokenlearner", learned, (frames, rows, cols)))
            n = learned
    stages.append(Stage("head", "head", stages[-1].tokens))
    return stages


def token_trace(cfg: ModelConfig) -> list[tuple[str, int]]:
    """``(stage name, tokens emitted)`` for every stage, statically."""
    return [(s.name, s.tokens) for s in plan(cfg)]


def pooling_reduction(tokens, grid: tuple[int, int], window: int) -> Tensor:
    """Average-pool ``[..., h*w, C]`` tokens laid out on an ``h x w`` grid."""
    tokens = as_tensor(tokens)
    h, w = grid
    if tokens.shape[-2] != h * w:
        raise DimensionError(f"{tokens.shape[-2]} tokens do not form a {h}x{w} grid")
    if h % window or w % window:
        raise ConfigError(f"{h}x{w} grid not divisible by {window}x{window} window", "reduction")
    lead, c = tokens.shape[:-2], tokens.shape[-1]
    cells = ops.reshape(tokens, lead + (h // window, window, w // window, window, c))
    pooled = ops.mean(cells, axis=(-4, -2))
    return ops.reshape(pooled, lead + ((h // window) * (w // window), c))


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.stages = plan(cfg)
        rng = np.random.default_rng(seed)
        c = cfg.width
        frames, rows, cols = cfg.grid
        tl = cfg.tokenlearner
        self.modules: dict[str, Module] = {}
        for st in self.stages:
            if st.kind == "embed":
                mod = PatchEmbed(cfg.input.height, cfg.input.width, cfg.input.frames, cfg.input.channels,
                                 cfg.patch.size, cfg.patch.tubelet_depth, c, rng, dtype)
            elif st.kind == "block":
                mod = TransformerBlock(c, cfg.heads, rng, cfg.mlp_ratio, st.info["attention"], dtype)
            elif st.kind == "tokenlearner":
                _, gh, gw = st.grid
                if tl.variant in ("conv4", "mlp"):
                    mod = TokenLearnerLayer(c, tl.tokens, tl.variant, rng, dtype=dtype)
                else:
                    mod = AltTokenizer(tl.variant, c, tl.tokens, gh, gw, rng, dtype)
            elif st.kind == "fuser":
                if st.info["alt"] is None:
                    mod = TokenFuserLayer(c, tl.tokens, frames, rng, dtype)
                else:
                    mod = AltFuser(st.info["alt"], c, cfg.heads, rng, dtype)
            elif st.kind == "head":
                mod = ClassifierHead(c, cfg.head.classes, rng, dtype)
            else:
                continue
            self.modules[st.name] = self.add_child(st.name, mod)
        if cfg.init == "fan_in":
            self._rescale_fan_in()

    def _rescale_fan_in(self) -> None:
        """Trunc-normal(0.02) weights become std ~1/sqrt(fan_in) and position embeddings N(0, 1).

        Biases, layer-norm and fuser mixing parameters keep their init.
        """
        scaled = {}
        for name, p in self.named_parameters().items():
            leaf = name.rsplit("/", 1)[-1]
            if p.data.ndim >= 2 and (leaf in ("weight", "kernel") or (name.split("/")[-2:-1] == ["mhsa"]
                                                                    and leaf.startswith("w"))):
                fan_in = int(np.prod(p.shape[:-1]))
                scaled[name] = p.data * (1.0 / (INIT_STD * math.sqrt(fan_in)))
            elif name == "patch_embed/pos":
                scaled[name] = p.data / INIT_STD
        self.load_state(scaled, strict=False)

    def __call__(self, batch, trace: list | None = None, capture_maps: bool = False, probe=None):
        """Logits ``[B, K]`` for a ``[B, T, H, W, Cin]`` (or ``[B, H, W, Cin]``) batch.

        With ``capture_maps`` also returns the weight maps of every attention
        TokenLearner stage, keyed by stage name, each ``[B, T', h, w, S]``.
        ``trace`` collects ``(stage, tokens)`` as observed at runtime and
        ``probe(stage, output)`` sees every stage's output tensor.
        """
        batch = as_tensor(batch)
        if batch.ndim == 4:
            batch = ops.reshape(batch, (batch.shape[0], 1) + batch.shape[1:])
        if batch.dtype != self.dtype:
            batch = Tensor(batch.data, dtype=self.dtype)
        b = batch.shape[0]
        maps: dict[str, Tensor] = {}
        x = None
        pending = None  # (tokens, maps) of the group TokenLearner awaiting its fuser
        for st in self.stages:
            mod = self.modules.get(st.name)
            if st.kind == "embed":
                grid = mod(batch)
                x = ops.reshape(grid, (b, st.tokens, self.cfg.width))
            elif st.kind == "block":
                x = mod(x)
            elif st.kind == "pool":
                f, h, w = st.grid
                per_frame = ops.reshape(x, (b, f, h * w, self.cfg.width))
                x = ops.reshape(pooling_reduction(per_frame, (h, w), st.info["window"]),
                                (b, st.tokens, self.cfg.width))
            elif st.kind == "tokenlearner":
                f, h, w = st.grid
                residual = ops.reshape(x, (b, f, h, w, self.cfg.width))
                if mod.has_maps:
                    z, m = mod.tokens_and_maps(residual)
                    if capture_maps:
                        maps[st.name] = m
                else:
                    z, m = mod(residual), None
                pending = (residual, m)
                x = ops.reshape(z, (b, st.tokens, self.cfg.width))
            elif st.kind == "fuser":
                residual, m = pending
                f, h, w = st.grid
                if isinstance(mod, TokenFuserLayer):
                    out = mod(x, residual)
                else:
                    per_frame = ops.reshape(x, (b, f, self.cfg.tokenlearner.tokens, self.cfg.width))
                    out = mod(per_frame, residual, m)
                x = ops.reshape(out, (b, st.tokens, self.cfg.width))
            elif st.kind == "head":
                if trace is not None:
                    trace.append((st.name, x.shape[-2]))
                x = mod(x)
            if trace is not None and st.kind != "head":
                trace.append((st.name, x.shape[-2]))
            if probe is not None:
                probe(st.name, x)
        return (x, maps) if capture_maps else x

    def first_tokenlearner_maps(self, batch) -> Tensor:
        """Weight maps ``[B, T', h, w, S]`` from the earliest TokenLearner stage."""
        names = [s.name for s in self.stages if s.kind == "tokenlearner"]
        if not names or not self.modules[names[0]].has_maps:
            raise ConfigError("model has no attention-based TokenLearner", "tokenlearner")
        _, maps = self(batch, capture_maps=True)
        return maps[names[0]]


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    return Model(cfg, seed, dtype)


def forward(model: Model, batch) -> Tensor:
    return model(batch)
