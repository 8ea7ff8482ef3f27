"""Command line entry point: ``tokenlearner <subcommand> ...``.

Exit codes: 0 success, 1 unreadable or corrupt file, 2 bad configuration,
3 numeric failure (non-finite loss or gradient).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

from .config import ModelConfig
from .errors import CheckpointError, ConfigError, NumericError

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, skip=()) -> None:
    """One optional flag per field; unset flags leave the field to the JSON file or default."""
    for f in fields(cls):
        if f.name in skip:
            continue
        kind = type(f.default) if f.default is not None else str
        parser.add_argument(_flag(f.name), dest=f.name, type=kind, default=None, help=f"default {f.default!r}")


def _collect(args, cls, base: dict) -> dict:
    doc = dict(base)
    for f in fields(cls):
        value = getattr(args, f.name, None)
        if value is not None:
            doc[f.name] = value
    return doc


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None


def _model_config(path) -> ModelConfig:
    if path is None:
        raise ConfigError("a model config is required", "--config")
    return ModelConfig.load(path)


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    from .data import TaskSpec, generate_dataset

    spec = TaskSpec.from_dict(_collect(args, TaskSpec, {}))
    data = generate_dataset(spec, args.n, args.out)
    print(f"wrote {len(data)} {spec.kind} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .plotting import plot_metrics
    from .train import TrainConfig, load_configs, train

    if args.resume:
        cfg, saved = load_configs(args.checkpoint)
        base = saved.to_dict()
    else:
        cfg, base = _model_config(args.config), _read_json(args.train_config)
    train_cfg = TrainConfig.from_dict(_collect(args, TrainConfig, base))
    data = load_dataset(args.data)
    result = train(cfg, train_cfg, data, checkpoint_path=args.checkpoint, metrics_path=args.metrics,
                   resume=args.resume, until=args.until)
    if result.final is not None:
        print(f"step {result.step}: train loss {result.final.loss:.6f} accuracy {result.final.accuracy:.4f}")
    else:
        print(f"stopped at step {result.step}")
    if args.metrics is not None:
        with open(args.metrics, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["split"] == "batch"]
        if rows:
            png = plot_metrics([int(r["step"]) for r in rows], [float(r["loss"]) for r in rows],
                               [float(r["accuracy"]) for r in rows], Path(args.metrics).with_suffix(".png"))
            print(f"wrote {args.metrics} and {png}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .train import evaluate

    m = evaluate(args.checkpoint, load_dataset(args.data))
    print(f"samples {m.count} loss {m.loss:.6f} accuracy {m.accuracy:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["samples", "loss", "accuracy"])
            w.writerow([m.count, repr(m.loss), repr(m.accuracy)])
    return EXIT_OK


def cmd_flops(args) -> int:
    from .cost import count_flops, insertion_layer, placement_sweep
    from .plotting import plot_layer_costs, plot_sweep

    cfg = _model_config(args.config)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        fractions = args.fractions or [i / 8 for i in range(9)]
        reports = placement_sweep(cfg, fractions)
        baseline = count_flops(cfg.with_tokenlearner(enabled=False))
        lines = ["fraction,insert_after_layer,gflops,params"]
        lines += [f"{f},{insertion_layer(cfg.depth, f)},{r.gflops!r},{r.total_params}"
                  for f, r in zip(fractions, reports)]
        print(f"{'fraction':>9}{'layer':>7}{'GFLOPs':>12}")
        for f, r in zip(fractions, reports):
            print(f"{f:>9.3f}{insertion_layer(cfg.depth, f):>7}{r.gflops:>12.4g}")
        print(f"baseline {baseline.gflops:.4g} GFLOPs")
        if out is not None:
            out.write_text("\n".join(lines) + "\n")
            plot_sweep(fractions, [r.gflops for r in reports], baseline.gflops, out.with_suffix(".png"))
            print(f"wrote {out} and {out.with_suffix('.png')}")
        return EXIT_OK
    report = count_flops(cfg)
    print(report.table())
    if out is not None:
        out.write_text(report.to_csv())
        plot_layer_costs([e.layer for e in report.entries], [e.flops / 1e9 for e in report.entries],
                         out.with_suffix(".png"))
        print(f"wrote {out} and {out.with_suffix('.png')}")
    return EXIT_OK


def cmd_export_maps(args) -> int:
    from .data import load_dataset
    from .train import export_attention_maps

    data = load_dataset(args.data)
    if not 0 <= args.index < len(data):
        raise ConfigError(f"sample index {args.index} outside dataset of {len(data)}", "--index")
    written = export_attention_maps(args.checkpoint, data.images[args.index], args.out, montage=not args.no_montage)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import AblationPlan, run_ablation

    plan = AblationPlan.load(args.plan)
    report = run_ablation(plan, log=print)
    print(report.table())
    out = args.out or Path(args.plan).with_suffix("")
    paths = report.write(out, figure=not args.no_figure)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .data import TaskSpec
    from .train import TrainConfig

    parser = argparse.ArgumentParser(prog="tokenlearner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic TLDS1 dataset")
    _add_dataclass_flags(p, TaskSpec)
    p.add_argument("-n", type=int, required=True, help="number of samples")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a TLDS1 dataset")
    p.add_argument("--config", help="model config JSON")
    p.add_argument("--train-config", help="training config JSON; flags override it")
    _add_dataclass_flags(p, TrainConfig)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", help="metrics CSV; a loss/accuracy PNG is written next to it")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint with its saved configs")
    p.add_argument("--until", type=int, help="stop after this many steps without finishing the schedule")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="loss and accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="optional CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="per-layer cost table, or a TokenLearner placement sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", action="store_true")
    p.add_argument("--fractions", type=float, nargs="+")
    p.add_argument("--out", help="CSV path; the figure goes next to it as .png")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("export-maps", help="write TokenLearner weight maps for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-montage", action="store_true")
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("ablate", help="train and compare the variants of a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", help="report path prefix (default: plan path without suffix)")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
