"""Side-by-side training runs of model variants on one synthetic task.

A plan is JSON::

    {
      "seed": 0,
      "task": {"kind": "locate-patch", "size": 32, "noise": 0.1},
      "train_samples": 1000,
      "train": {"steps": 2000, "learning_rate": 0.05},
      "base": { ...ModelConfig... },
      "variants": [
        {"name": "tokenlearner"},
        {"name": "fixed-grid", "overrides": {"tokenlearner": {"variant": "fixed_grid"}}},
        {"name": "pool", "overrides": {"tokenlearner": {"enabled": false},
                                       "reduction": {"kind": "pool2x2", "at_layers": [1]}}}
      ]
    }

``overrides`` are merged into ``base`` key by key; a variant may instead give
a complete ``config``. Every variant is built and validated before any
training starts.
"""

from __future__ import annotations

import copy
import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .config import ModelConfig
from .cost import count_flops
from .data import TaskSpec, make_dataset
from .errors import ConfigError
from .train import TrainConfig, train

REPORT_FIELDS = ("variant", "architecture", "tokenizer", "fuser", "insert_after_layer", "tokens",
                 "final_accuracy", "final_loss", "steps_to_95", "gflops", "params")
PLAN_KEYS = {"seed", "task", "train_samples", "train", "base", "variants", "window"}


@dataclass(frozen=True)
class Variant:
    name: str
    config: ModelConfig


@dataclass(frozen=True)
class AblationPlan:
    task: TaskSpec
    train: TrainConfig
    variants: tuple[Variant, ...]
    train_samples: int = 1000
    window: int = 20
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> AblationPlan:
        unknown = sorted(set(doc) - PLAN_KEYS)
        if unknown:
            raise ConfigError(f"unknown plan field(s) {unknown}")
        seed = doc.get("seed", 0)
        task = TaskSpec.from_dict({**doc.get("task", {}), "seed": seed})
        train_cfg = TrainConfig.from_dict({**doc.get("train", {}), "seed": seed})
        base = doc.get("base", {})
        variants = []
        for i, v in enumerate(doc.get("variants", [])):
            where = f"variants[{i}]"
            extra = sorted(set(v) - {"name", "overrides", "config"})
            if extra or "name" not in v:
                raise ConfigError(f"each variant needs a name plus overrides or config; got {sorted(v)}", where)
            full = v["config"] if "config" in v else _merge(base, v.get("overrides", {}))
            try:
                cfg = ModelConfig.from_dict(full)
            except ConfigError as exc:
                raise ConfigError(f"variant {v['name']!r}: {exc}", where) from None
            variants.append(Variant(v["name"], cfg))
        if not variants:
            raise ConfigError("plan has no variants", "variants")
        names = [v.name for v in variants]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate variant names in {names}", "variants")
        plan = cls(task, train_cfg, tuple(variants), doc.get("train_samples", 1000), doc.get("window", 20), seed)
        plan.validate()
        return plan

    @classmethod
    def load(cls, path) -> AblationPlan:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid plan JSON: {exc}") from None
        return cls.from_dict(doc)

    def validate(self) -> None:
        if not isinstance(self.train_samples, int) or self.train_samples < 1:
            raise ConfigError("must be a positive integer", "train_samples")
        if not isinstance(self.window, int) or self.window < 1:
            raise ConfigError("must be a positive integer", "window")
        shape = (self.task.frames, self.task.size, self.task.size, 1)
        for v in self.variants:
            inp = v.config.input
            if (inp.frames, inp.height, inp.width, inp.channels) != shape:
                raise ConfigError(f"variant {v.name!r} expects input {(inp.frames, inp.height, inp.width, inp.channels)}"
                                  f", task produces {shape}", "variants")
            if v.config.head.classes != self.task.classes:
                raise ConfigError(f"variant {v.name!r} has {v.config.head.classes} classes, task "
                                  f"{self.task.classes}", "variants")


def _merge(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def steps_to_accuracy(accuracies: list[float], target: float = 0.95, window: int = 20) -> int | None:
    """Steps taken until the trailing ``window``-step mean batch accuracy first reaches ``target``."""
    total = 0.0
    for i, acc in enumerate(accuracies):
        total += acc
        if i >= window:
            total -= accuracies[i - window]
        if i + 1 >= window and total / window >= target:
            return i + 1
    return None


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: "" if row[k] is None else row[k] for k in REPORT_FIELDS})
        return buf.getvalue()

    def table(self) -> str:
        head = f"{'variant':<18}{'arch':>6}{'tokenizer':>14}{'acc':>8}{'loss':>10}{'to95':>7}{'GFLOPs':>11}{'params':>9}"
        lines = [head]
        for r in self.rows:
            to95 = "-" if r["steps_to_95"] is None else str(r["steps_to_95"])
            lines.append(f"{r['variant']:<18}{r['architecture']:>6}{r['tokenizer']:>14}{r['final_accuracy']:>8.4f}"
                         f"{r['final_loss']:>10.4f}{to95:>7}{r['gflops']:>11.4g}{r['params']:>9}")
        return "\n".join(lines)

    def write(self, prefix, figure: bool = True) -> list[Path]:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        paths = [prefix.with_suffix(".csv"), prefix.with_suffix(".txt")]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.table() + "\n")
        if figure:
            from .plotting import plot_ablation
            paths.append(plot_ablation([r["variant"] for r in self.rows], [r["final_accuracy"] for r in self.rows],
                                       [r["gflops"] for r in self.rows], prefix.with_suffix(".png")))
        return paths


def run_ablation(plan: AblationPlan, log=None) -> AblationReport:
    """Train every variant on the same data and seed; one report row per variant."""
    data = make_dataset(plan.task, plan.train_samples)
    report = AblationReport()
    for v in plan.variants:
        accs: list[float] = []
        result = train(v.config, plan.train, data, callback=lambda step, loss, acc: accs.append(acc))
        cost = count_flops(v.config)
        tl = v.config.tokenlearner
        report.rows.append({
            "variant": v.name,
            "architecture": v.config.architecture,
            "tokenizer": tl.variant if tl.enabled else v.config.reduction.kind,
            "fuser": (v.config.tokenfuser.alt or "tokenfuser") if v.config.tokenfuser.enabled else "",
            "insert_after_layer": tl.insert_after_layer if tl.enabled else "",
            "tokens": tl.tokens if tl.enabled else "",
            "final_accuracy": result.final.accuracy,
            "final_loss": result.final.loss,
            "steps_to_95": steps_to_accuracy(accs, 0.95, plan.window),
            "gflops": cost.gflops,
            "params": cost.total_params,
        })
        if log is not None:
            log(f"{v.name}: accuracy {result.final.accuracy:.4f}")
    return report
