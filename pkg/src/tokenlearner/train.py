"""Training, evaluation, checkpointing and attention-map export for desk-scale runs.

Training is float32 and single-threaded. A checkpoint is a TLKT1 archive
holding the model parameters, the momentum buffers (``opt/<name>``) and the
step counter (``step``), next to a JSON sidecar ``<checkpoint>.json`` with
the model and training configs needed to rebuild the model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint, ops
from .config import ModelConfig
from .data import Dataset
from .errors import CheckpointError, ConfigError, NumericError
from .learner import write_pgm
from .model import Model, build_model
from .tensor import grad

DTYPE = np.float32
METRIC_FIELDS = ("step", "split", "loss", "accuracy")


@dataclass(frozen=True)
class TrainConfig:
    """SGD with momentum under a cosine learning-rate decay (after optional linear warmup)."""

    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    warmup_steps: int = 0
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    eval_chunk: int = 250

    def validate(self) -> None:
        for name in ("steps", "batch_size", "log_every", "eval_chunk"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", name)
        for name in ("warmup_steps", "checkpoint_every", "seed"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 0:
                raise ConfigError(f"must be a non-negative integer, got {value!r}", name)
        if not self.learning_rate > 0:
            raise ConfigError("must be positive", "learning_rate")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "momentum")
        if not self.clip_norm > 0:
            raise ConfigError("must be positive", "clip_norm")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    span = max(cfg.steps - cfg.warmup_steps, 1)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample indices for ``step``: a stream of per-epoch permutations, cut into batches.

    Epoch ``e`` is ``default_rng([seed, e]).permutation(n)``, so any step's
    batch can be recomputed without replaying earlier ones.
    """
    start = step * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    filled = 0
    while filled < batch_size:
        epoch, offset = divmod(start + filled, n)
        take = min(n - offset, batch_size - filled)
        out[filled:filled + take] = np.random.default_rng([seed, epoch]).permutation(n)[offset:offset + take]
        filled += take
    return out


# ---------------------------------------------------------------- checkpoints

def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_checkpoint(path, model: Model, velocity: dict[str, np.ndarray], step: int,
                    train_cfg: TrainConfig) -> None:
    tensors = dict(model.state_dict())
    tensors.update({f"opt/{k}": v for k, v in velocity.items()})
    tensors["step"] = np.array(step, dtype=np.float32)
    checkpoint.save(path, tensors)
    sidecar = {"model": model.cfg.to_dict(), "train": train_cfg.to_dict()}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_configs(path) -> tuple[ModelConfig, TrainConfig]:
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"{path}: missing config sidecar {side}")
    doc = json.loads(side.read_text())
    return ModelConfig.from_dict(doc["model"]), TrainConfig.from_dict(doc["train"])


def restore(path, cfg: ModelConfig | None = None) -> tuple[Model, dict[str, np.ndarray], int]:
    """Rebuild the model from a checkpoint; returns ``(model, velocity, step)``.

    Parameter names and shapes must match ``cfg`` exactly; on any mismatch a
    :class:`CheckpointError` lists every offending tensor and nothing is loaded.
    """
    tensors = checkpoint.load(path)
    if cfg is None:
        cfg, _ = load_configs(path)
    model = build_model(cfg, 0, DTYPE)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt/") and k != "step"}
    model.load_state(params)
    own = model.named_parameters()
    velocity = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
    if velocity:
        bad = sorted(set(own) ^ set(velocity))
        bad += sorted(k for k in velocity if k in own and velocity[k].shape != own[k].shape)
        if bad:
            raise CheckpointError(f"optimizer state mismatch: {bad}")
    step = int(tensors["step"]) if "step" in tensors else 0
    return model, velocity, step


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class Metrics:
    loss: float
    accuracy: float
    count: int


def evaluate_model(model: Model, data: Dataset, chunk: int = 250) -> Metrics:
    """Mean loss and accuracy over ``data`` in fixed-size chunks (deterministic)."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), chunk):
        part = data.subset(slice(start, start + chunk))
        logits = model(part.images)
        total_loss += ops.cross_entropy(logits, part.labels).item() * len(part)
        correct += int((logits.data.argmax(axis=-1) == part.labels).sum())
    return Metrics(total_loss / len(data), correct / len(data), len(data))


def evaluate(path, data: Dataset) -> Metrics:
    """Evaluate a saved checkpoint with the chunking it was trained with."""
    cfg, train_cfg = load_configs(path)
    _check_data(cfg, data)
    model, _, _ = restore(path, cfg)
    with threadpool_limits(1):
        return evaluate_model(model, data, train_cfg.eval_chunk)


def _check_data(cfg: ModelConfig, data: Dataset) -> None:
    expected = (cfg.input.frames, cfg.input.height, cfg.input.width, cfg.input.channels)
    if data.images.shape[1:] != expected:
        raise ConfigError(f"dataset samples {data.images.shape[1:]} do not match model input {expected}", "input")
    if data.classes != cfg.head.classes:
        raise ConfigError(f"dataset has {data.classes} classes, model {cfg.head.classes}", "head.classes")


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: Model
    step: int
    final: Metrics | None
    history: list[dict]


def _first_non_finite(model: Model, batch: np.ndarray, grads: dict | None = None) -> str:
    if not np.isfinite(batch).all():
        return "input batch"
    for name, p in model.named_parameters().items():
        if not np.isfinite(p.data).all():
            return f"parameter {name}"
    if grads is not None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                return f"gradient of {name}"
    found: list[str] = []

    def probe(stage, out):
        if not found and not np.isfinite(out.data).all():
            found.append(stage)

    model(batch, probe=probe)
    return f"output of stage {found[0]}" if found else "loss"


def _write_metrics(path, rows: list[dict], append: bool) -> None:
    if path is None:
        return
    path = Path(path)
    new = not append or not path.exists()
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def train(cfg: ModelConfig, train_cfg: TrainConfig, data: Dataset, checkpoint_path=None,
          metrics_path=None, resume: bool = False, until: int | None = None, callback=None) -> TrainResult:
    """Train from scratch (or from ``checkpoint_path`` when ``resume``) up to step ``until``.

    Batch metrics are logged every ``log_every`` steps. Reaching
    ``train_cfg.steps`` also logs one ``train`` row: loss and accuracy over
    the whole training set, identical to :func:`evaluate` on the saved
    checkpoint. ``callback(step, loss, accuracy)`` sees every step.
    """
    cfg.validate()
    train_cfg.validate()
    _check_data(cfg, data)
    until = train_cfg.steps if until is None else min(until, train_cfg.steps)
    if resume:
        if checkpoint_path is None:
            raise ConfigError("resuming needs a checkpoint path", "checkpoint")
        model, velocity, step = restore(checkpoint_path, cfg)
    else:
        model, velocity, step = build_model(cfg, train_cfg.seed, DTYPE), {}, 0
    names = list(model.named_parameters())
    velocity = {k: velocity.get(k, np.zeros(model.named_parameters()[k].shape, DTYPE)) for k in names}
    history: list[dict] = []
    _write_metrics(metrics_path, [], append=resume)

    with threadpool_limits(1):
        while step < until:
            idx = batch_indices(len(data), train_cfg.batch_size, train_cfg.seed, step)
            images, labels = data.images[idx], data.labels[idx]
            params = model.named_parameters()
            logits = model(images)
            loss = ops.cross_entropy(logits, labels)
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(f"step {step}: loss is {loss_value}; first non-finite tensor: "
                                   f"{_first_non_finite(model, images)}")
            grads = {n: g.data for n, g in zip(names, grad(loss, [params[n] for n in names]))}
            norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))
            if not math.isfinite(norm):
                raise NumericError(f"step {step}: gradient norm is {norm}; first non-finite tensor: "
                                   f"{_first_non_finite(model, images, grads)}")
            clip = min(1.0, train_cfg.clip_norm / norm) if norm > 0 else 1.0
            lr = learning_rate(train_cfg, step)
            new_state = {}
            for n in names:
                v = train_cfg.momentum * velocity[n] + clip * grads[n]
                velocity[n] = v.astype(DTYPE, copy=False)
                new_state[n] = params[n].data - lr * velocity[n]
            model.load_state(new_state)
            accuracy = float((logits.data.argmax(axis=-1) == labels).mean())
            if callback is not None:
                callback(step, loss_value, accuracy)
            if step % train_cfg.log_every == 0:
                row = {"step": step, "split": "batch", "loss": loss_value, "accuracy": accuracy}
                history.append(row)
                _write_metrics(metrics_path, [row], append=True)
            step += 1
            if checkpoint_path is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, velocity, step, train_cfg)

        final = None
        if step == train_cfg.steps:
            final = evaluate_model(model, data, train_cfg.eval_chunk)
            row = {"step": step, "split": "train", "loss": final.loss, "accuracy": final.accuracy}
            history.append(row)
            _write_metrics(metrics_path, [row], append=True)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, velocity, step, train_cfg)
    return TrainResult(model, step, final, history)


# ---------------------------------------------------------------- attention maps

def attention_maps(model: Model, images: np.ndarray) -> np.ndarray:
    """Weight maps ``[B, T', h, w, S]`` of the model's first TokenLearner."""
    with threadpool_limits(1):
        return np.asarray(model.first_tokenlearner_maps(images).data, dtype=np.float64)


def bright_quadrant_ratio(maps: np.ndarray, label: int) -> float:
    """Mean weight on quadrant ``label`` over the mean of the other three quadrants' means.

    ``maps`` is ``[h, w, S]``; weights are first averaged over the S maps.
    """
    mean_map = maps.mean(axis=-1)
    h, w = mean_map.shape
    quads = [mean_map[:h // 2, :w // 2], mean_map[:h // 2, w // 2:],
             mean_map[h // 2:, :w // 2], mean_map[h // 2:, w // 2:]]
    means = [q.mean() for q in quads]
    others = [m for i, m in enumerate(means) if i != label]
    return float(means[label] / np.mean(others))


def export_attention_maps(path, sample: np.ndarray, out_dir, montage: bool = True) -> list[Path]:
    """Write one PGM per token per frame from the first TokenLearner, for a single sample.

    Files are ``frame{t}_token{i}.pgm`` at the feature-grid resolution. With
    ``montage`` a PNG grid of all maps is written next to them.
    """
    model, _, _ = restore(path)
    sample = np.asarray(sample, dtype=DTYPE)
    if sample.ndim == 3:
        sample = sample[None]
    maps = attention_maps(model, sample[None])[0]  # [T', h, w, S]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for t in range(maps.shape[0]):
        for i in range(maps.shape[-1]):
            p = out_dir / f"frame{t}_token{i}.pgm"
            write_pgm(p, maps[t, :, :, i])
            written.append(p)
    if montage:
        from .plotting import plot_maps
        plot_maps(maps, sample, out_dir / "maps.png")
    return written

