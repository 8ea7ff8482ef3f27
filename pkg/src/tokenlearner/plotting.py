"""Figures written next to the CSV reports. Rendering is headless (Agg)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(fractions, gflops, baseline: float, path, title: str = "") -> Path:
    """Total GFLOPs against TokenLearner insertion fraction, with the no-TL baseline."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(fractions, gflops, marker="o", label="with TokenLearner")
    ax.axhline(baseline, color="gray", linestyle="--", label="baseline")
    ax.set_xlabel("insertion point (fraction of depth)")
    ax.set_ylabel("GFLOPs")
    ax.set_ylim(bottom=0)
    if title:
        ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def plot_layer_costs(layers, gflops, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(5, 0.25 * len(layers)), 3.5))
    ax.bar(range(len(layers)), gflops)
    ax.set_xticks(range(len(layers)), layers, rotation=90, fontsize=7)
    ax.set_ylabel("GFLOPs")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_metrics(steps, losses, accuracies, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, losses, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("loss", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(steps, accuracies, color="tab:orange")
    ax2.set_ylabel("batch accuracy", color="tab:orange")
    ax2.set_ylim(0, 1.05)
    return _save(fig, path)


def plot_ablation(names, accuracies, gflops, path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.8), layout="constrained")
    pos = np.arange(len(names))
    ax1.bar(pos, accuracies)
    ax1.set_xticks(pos, names, rotation=45, ha="right")
    ax1.set_ylabel("final train accuracy")
    ax1.set_ylim(0, 1.05)
    ax2.bar(pos, gflops, color="tab:green")
    ax2.set_xticks(pos, names, rotation=45, ha="right")
    ax2.set_ylabel("GFLOPs")
    return _save(fig, path)


def plot_maps(maps: np.ndarray, sample: np.ndarray, path) -> Path:
    """Input frames (first column) beside every token's weight map; ``maps`` is ``[T', h, w, S]``."""
    frames, _, _, tokens = maps.shape
    fig, axes = plt.subplots(frames, tokens + 1, figsize=(1.4 * (tokens + 1), 1.4 * frames), squeeze=False)
    for t in range(frames):
        axes[t, 0].imshow(sample[min(t, len(sample) - 1), :, :, 0], cmap="gray")
        for i in range(tokens):
            axes[t, i + 1].imshow(maps[t, :, :, i], cmap="gray", vmin=0, vmax=1)
            if t == 0:
                axes[t, i + 1].set_title(f"token {i}", fontsize=7)
    for ax in axes.flat:
        ax.set_axis_off()
    return _save(fig, path)
