"""Model configuration, parsed strictly from JSON.

Example document::

    {
      "input": {"height": 32, "width": 32, "frames": 1, "channels": 1},
      "patch": {"size": 4, "tubelet_depth": 1},
      "width": 32, "depth": 2, "heads": 2,
      "tokenlearner": {"enabled": true, "tokens": 8, "variant": "conv4", "insert_after_layer": 1},
      "head": {"classes": 4}
    }

Omitted sections take their defaults; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError

TL_VARIANTS = ("conv4", "mlp", "fixed_grid", "direct_dense", "pool_mlp")
FUSER_ALTS = (None, "unpool", "reproject")
REDUCTIONS = {"none": 1, "pool2x2": 2, "pool4x4": 4}
INITS = ("trunc_normal", "fan_in")


@dataclass(frozen=True)
class InputSpec:
    height: int
    width: int
    frames: int = 1
    channels: int = 3


@dataclass(frozen=True)
class PatchSpec:
    size: int
    tubelet_depth: int = 1


@dataclass(frozen=True)
class TokenLearnerSpec:
    enabled: bool = False
    tokens: int = 8
    variant: str = "conv4"
    insert_after_layer: int = 0


@dataclass(frozen=True)
class TokenFuserSpec:
    enabled: bool = False
    alt: str | None = None


@dataclass(frozen=True)
class ReductionSpec:
    """Token pooling. Layer ``j`` in ``at_layers`` is the first block to see pooled tokens."""

    kind: str = "none"
    at_layers: tuple[int, ...] = ()


@dataclass(frozen=True)
class HeadSpec:
    classes: int = 1000


@dataclass(frozen=True)
class ModelConfig:
    input: InputSpec
    patch: PatchSpec
    width: int
    depth: int
    heads: int
    extra_layers: int = 0
    mlp_ratio: int = 4
    block_attention: str = "mhsa"
    # "fan_in": weight matrices and kernels at std ~1/sqrt(fan_in), position embeddings N(0, 1)
    init: str = "trunc_normal"
    tokenlearner: TokenLearnerSpec = field(default_factory=TokenLearnerSpec)
    tokenfuser: TokenFuserSpec = field(default_factory=TokenFuserSpec)
    reduction: ReductionSpec = field(default_factory=ReductionSpec)
    head: HeadSpec = field(default_factory=HeadSpec)

    @property
    def total_depth(self) -> int:
        return self.depth + self.extra_layers

    @property
    def grid(self) -> tuple[int, int, int]:
        """(frames, rows, cols) of the patch grid."""
        p = self.patch
        return (self.input.frames // p.tubelet_depth, self.input.height // p.size, self.input.width // p.size)

    @property
    def architecture(self) -> str:
        if not self.tokenlearner.enabled:
            return "pool" if self.reduction.kind != "none" else "baseline"
        return "b" if self.tokenfuser.enabled else "a"

    def with_tokenlearner(self, **changes) -> ModelConfig:
        return replace(self, tokenlearner=replace(self.tokenlearner, **changes))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["reduction"]["at_layers"] = list(self.reduction.at_layers)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> ModelConfig:
        cfg = _build(cls, doc, "")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> ModelConfig:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> ModelConfig:
        return cls.from_json(Path(path).read_text())

    def validate(self) -> None:
        def positive(value, name):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", name)

        for name in ("height", "width", "frames", "channels"):
            positive(getattr(self.input, name), f"input.{name}")
        positive(self.patch.size, "patch.size")
        positive(self.patch.tubelet_depth, "patch.tubelet_depth")
        for name in ("width", "depth", "heads", "mlp_ratio"):
            positive(getattr(self, name), name)
        positive(self.head.classes, "head.classes")
        if not isinstance(self.extra_layers, int) or self.extra_layers < 0:
            raise ConfigError("must be a non-negative integer", "extra_layers")
        if self.input.height % self.patch.size or self.input.width % self.patch.size:
            raise ConfigError(f"input {self.input.height}x{self.input.width} not divisible by "
                              f"patch size {self.patch.size}", "patch.size")
        if self.input.frames % self.patch.tubelet_depth:
            raise ConfigError(f"{self.input.frames} frames not divisible by tubelet depth "
                              f"{self.patch.tubelet_depth}", "patch.tubelet_depth")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads", "heads")
        if self.block_attention not in ("mhsa", "vector"):
            raise ConfigError(f"unknown attention {self.block_attention!r}", "block_attention")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}; expected one of {INITS}", "init")

        tl, fu, red = self.tokenlearner, self.tokenfuser, self.reduction
        if tl.variant not in TL_VARIANTS:
            raise ConfigError(f"unknown variant {tl.variant!r}; expected one of {TL_VARIANTS}",
                              "tokenlearner.variant")
        positive(tl.tokens, "tokenlearner.tokens")
        if not isinstance(tl.insert_after_layer, int) or not 0 <= tl.insert_after_layer <= self.depth:
            raise ConfigError(f"must lie in [0, {self.depth}], got {tl.insert_after_layer!r}",
                              "tokenlearner.insert_after_layer")
        if fu.enabled and not tl.enabled:
            raise ConfigError("a TokenFuser needs an enabled TokenLearner", "tokenfuser.enabled")
        if fu.alt not in FUSER_ALTS:
            raise ConfigError(f"unknown alternative {fu.alt!r}", "tokenfuser.alt")
        if fu.enabled and fu.alt == "unpool" and tl.variant not in ("conv4", "mlp"):
            raise ConfigError("unpooling needs weight maps from an attention tokenizer", "tokenfuser.alt")
        if self.block_attention == "vector" and not tl.enabled:
            raise ConfigError("vector attention is only used after a TokenLearner", "block_attention")
        if tl.enabled and tl.variant == "fixed_grid":
            from .learner import grid_factors
            rows, cols = grid_factors(tl.tokens)
            _, gh, gw = self.grid
            if gh % rows or gw % cols:
                raise ConfigError(f"{gh}x{gw} patch grid does not split into {rows}x{cols} cells",
                                  "tokenlearner.tokens")

        if red.kind not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {red.kind!r}; expected one of {tuple(REDUCTIONS)}",
                              "reduction.kind")
        if red.kind == "none" and red.at_layers:
            raise ConfigError("layers given without a pooling kind", "reduction.at_layers")
        if red.kind != "none":
            if tl.enabled:
                raise ConfigError("pooling reduction and TokenLearner are alternatives, not combinable",
                                  "reduction.kind")
            if not red.at_layers:
                raise ConfigError("pooling needs at least one layer", "reduction.at_layers")
            layers = list(red.at_layers)
            if any(b <= a for a, b in zip(layers, layers[1:])):
                raise ConfigError(f"must be strictly increasing, got {layers}", "reduction.at_layers")
            if layers[0] < 1 or layers[-1] > self.total_depth:
                raise ConfigError(f"must lie in [1, {self.total_depth}], got {layers}", "reduction.at_layers")
            k = REDUCTIONS[red.kind]
            _, gh, gw = self.grid
            for layer in layers:
                if gh % k or gw % k:
                    raise ConfigError(f"{gh}x{gw} grid not divisible by {k}x{k} window at layer {layer}",
                                      "reduction.at_layers")
                gh, gw = gh // k, gw // k


def _build(cls, doc, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"expected an object, got {type(doc).__name__}", path or None)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown}", path or None)
    kwargs = {}
    for name, f in known.items():
        where = f"{path}.{name}" if path else name
        if name not in doc:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError("required field missing", where)
            continue
        value = doc[name]
        sub = _SECTIONS.get(name) if cls is ModelConfig else None
        if sub is not None:
            value = _build(sub, value, where)
        elif name == "at_layers":
            if not isinstance(value, list):
                raise ConfigError("must be a list of layer indices", where)
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {
    "input": InputSpec,
    "patch": PatchSpec,
    "tokenlearner": TokenLearnerSpec,
    "tokenfuser": TokenFuserSpec,
    "reduction": ReductionSpec,
    "head": HeadSpec,
}

_VIT_SIZES = {"S": (384, 12, 6), "B": (768, 12, 12), "L": (1024, 24, 16)}


def vit_config(size: str, patch: int, resolution: int, *, frames: int = 1, tubelet_depth: int = 1,
               classes: int = 1000, tokens: int | None = None, insert_after: int | None = None,
               fuser: bool = False, extra_layers: int = 0, variant: str = "conv4") -> ModelConfig:
    """ViT-{S,B,L}/patch at a square resolution, optionally with a TokenLearner."""
    width, depth, heads = _VIT_SIZES[size]
    tl = TokenLearnerSpec()
    if tokens is not None:
        tl = TokenLearnerSpec(enabled=True, tokens=tokens, variant=variant,
                              insert_after_layer=depth // 2 if insert_after is None else insert_after)
    cfg = ModelConfig(
        input=InputSpec(resolution, resolution, frames, 3),
        patch=PatchSpec(patch, tubelet_depth),
        width=width, depth=depth, heads=heads, extra_layers=extra_layers,
        tokenlearner=tl, tokenfuser=TokenFuserSpec(enabled=fuser),
        head=HeadSpec(classes),
    )
    cfg.validate()
    return cfg
