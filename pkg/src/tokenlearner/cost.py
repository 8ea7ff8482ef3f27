"""Analytical FLOPs and parameter counts over a model's stage plan.

Dense work is counted as multiply-accumulates; one MAC is two FLOPs.
Elementwise work (layer norm, softmax, gelu, sigmoid, bias and residual adds)
is charged a small fixed number of FLOPs per element. Reported numbers are
raw FLOPs divided by :data:`FLOP_DIVISOR`, which puts them in the same
convention as published ViT GFLOPs tables (effectively MACs).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

from .config import ModelConfig, vit_config
from .model import Stage, plan

# raw FLOPs per element for elementwise work
LN_FLOPS = 5
SOFTMAX_FLOPS = 3
GELU_FLOPS = 4
SIGMOID_FLOPS = 4

# chosen by choose_flop_divisor() against ViT-B/16 @ 384 = 55.6 GFLOPs, then frozen
FLOP_DIVISOR = 2
REFERENCE_GFLOPS = 55.6


@dataclass(frozen=True)
class CostEntry:
    layer: str
    tokens: int
    flops: float
    params: int


@dataclass
class CostReport:
    entries: list[CostEntry] = field(default_factory=list)
    convention: str = "mac"  # raw FLOPs / FLOP_DIVISOR

    @property
    def total_flops(self) -> float:
        return math.fsum(e.flops for e in self.entries)

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "tokens", "flops", "params"])
        for e in self.entries:
            w.writerow([e.layer, e.tokens, f"{e.flops:.0f}", e.params])
        w.writerow(["total", "", f"{self.total_flops:.0f}", self.total_params])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'layer':<16}{'tokens':>8}{'GFLOPs':>12}{'params':>14}"]
        for e in self.entries:
            lines.append(f"{e.layer:<16}{e.tokens:>8}{e.flops / 1e9:>12.4g}{e.params:>14,}")
        lines.append(f"{'total':<16}{'':>8}{self.gflops:>12.4f}{self.total_params:>14,}")
        return "\n".join(lines)


def _dense(n: int, d_in: int, d_out: int) -> tuple[int, int, int]:
    """(MACs, elementwise FLOPs, params) of a dense layer over ``n`` rows."""
    return n * d_in * d_out, n * d_out, d_in * d_out + d_out


def _sum(*parts):
    return tuple(map(sum, zip(*parts)))


def _block_cost(cfg: ModelConfig, n: int, attention: str) -> tuple[int, int, int]:
    c, r = cfg.width, cfg.mlp_ratio
    ln = (0, 2 * LN_FLOPS * n * c, 4 * c)
    residual = (0, 2 * n * c, 0)
    mlp = _sum(_dense(n, c, r * c), (0, GELU_FLOPS * n * r * c, 0), _dense(n, r * c, c))
    if attention == "mhsa":
        proj = _sum(*(_dense(n, c, c) for _ in range(4)))
        # QK^T and AV; logit scaling plus softmax on h*N^2 entries
        attn = (2 * n * n * c, (SOFTMAX_FLOPS + 1) * cfg.heads * n * n, 0)
    else:
        d = c
        proj = _sum(_dense(n, c, d), _dense(n, c, d), _dense(n, c, c))
        # q_i*k_j products, channel-wise softmax, weighted sum of values
        attn = (n * n * c, n * n * d + SOFTMAX_FLOPS * n * n * c, 0)
    return _sum(ln, residual, mlp, proj, attn)


def _tokenlearner_cost(cfg: ModelConfig, st: Stage) -> tuple[int, int, int]:
    f, h, w = st.grid
    hw, c, s = h * w, cfg.width, cfg.tokenlearner.tokens
    variant = cfg.tokenlearner.variant
    if variant == "conv4":
        convs = (f * hw * 9 * (c * s + 3 * s * s), f * hw * s * 4, 9 * (c * s + 3 * s * s) + 4 * s)
        acts = (0, f * hw * s * (3 * GELU_FLOPS + SIGMOID_FLOPS), 0)
        pool = (f * s * hw * c, f * s * c, 0)
        return _sum(convs, acts, pool)
    if variant == "mlp":
        hid = max(s, c // 2)
        mlp = _sum(_dense(f * hw, c, hid), (0, GELU_FLOPS * f * hw * hid, 0), _dense(f * hw, hid, s))
        return _sum(mlp, (0, SIGMOID_FLOPS * f * hw * s, 0), (f * s * hw * c, f * s * c, 0))
    if variant == "fixed_grid":
        return (0, f * hw * c, 0)
    if variant == "direct_dense":
        return _dense(f, hw * c, s * c)
    # pool_mlp
    return _sum((0, f * hw * c, 0), _dense(f, c, c), (0, GELU_FLOPS * f * c, 0), _dense(f, c, s * c))


def _fuser_cost(cfg: ModelConfig, st: Stage) -> tuple[int, int, int]:
    f, h, w = st.grid
    hw, c, s = h * w, cfg.width, cfg.tokenlearner.tokens
    alt = st.info.get("alt")
    residual = (0, f * hw * c, 0)
    if alt is None:
        mix = ((f * s) ** 2 * c, 0, (f * s) ** 2)
        beta = _sum(_dense(f * hw, c, s), (0, SIGMOID_FLOPS * f * hw * s, 0))
        return _sum(mix, beta, (f * hw * s * c, 0, 0), residual)
    if alt == "unpool":
        return _sum((f * hw * s * c, 0, 0), residual)
    q = _dense(f * hw, c, c)
    kv = _sum(_dense(f * s, c, c), _dense(f * s, c, c))
    out = _dense(f * hw, c, c)
    attn = (2 * f * hw * s * c, (SOFTMAX_FLOPS + 1) * cfg.heads * f * hw * s, 0)
    norms = (0, LN_FLOPS * f * (hw + s) * c, 4 * c)
    return _sum(q, kv, out, attn, norms, residual)


def _stage_cost(cfg: ModelConfig, st: Stage, tokens_in: int) -> tuple[int, int, int]:
    c = cfg.width
    if st.kind == "embed":
        p = cfg.patch
        patch_dim = p.size * p.size * p.tubelet_depth * cfg.input.channels
        mac, elem, params = _dense(st.tokens, patch_dim, c)
        return mac, elem + st.tokens * c, params + st.tokens * c
    if st.kind == "block":
        return _block_cost(cfg, st.tokens, st.info["attention"])
    if st.kind == "pool":
        return (0, tokens_in * c, 0)
    if st.kind == "tokenlearner":
        return _tokenlearner_cost(cfg, st)
    if st.kind == "fuser":
        return _fuser_cost(cfg, st)
    if st.kind == "head":
        n = st.tokens
        return _sum((0, LN_FLOPS * n * c + n * c, 2 * c), _dense(1, c, cfg.head.classes))
    raise ValueError(f"unknown stage kind {st.kind!r}")


def count_flops(cfg: ModelConfig) -> CostReport:
    """Per-stage FLOPs (reported convention) and exact parameter counts."""
    report = CostReport()
    tokens_in = 0
    for st in plan(cfg):
        mac, elem, params = _stage_cost(cfg, st, tokens_in)
        raw = 2 * mac + elem
        report.entries.append(CostEntry(st.name, st.tokens, raw / FLOP_DIVISOR, int(params)))
        tokens_in = st.tokens
    return report


def count_params(cfg: ModelConfig) -> CostReport:
    return count_flops(cfg)


def choose_flop_divisor(reference: float = REFERENCE_GFLOPS) -> int:
    """The divisor in {1, 2} that lands ViT-B/16 @ 384 nearest ``reference`` GFLOPs."""
    raw = count_flops(vit_config("B", 16, 384)).total_flops * FLOP_DIVISOR / 1e9
    return min((1, 2), key=lambda d: abs(raw / d - reference))


def insertion_layer(depth: int, fraction: float) -> int:
    return int(math.floor(fraction * depth + 0.5))


def placement_sweep(cfg: ModelConfig, fractions) -> list[CostReport]:
    """One report per TokenLearner insertion point ``round(fraction * depth)``."""
    reports = []
    tl = replace(cfg.tokenlearner, enabled=True)
    for frac in fractions:
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"insertion fraction {frac} outside [0, 1]")
        moved = replace(cfg, tokenlearner=replace(tl, insert_after_layer=insertion_layer(cfg.depth, frac)))
        reports.append(count_flops(moved))
    return reports
