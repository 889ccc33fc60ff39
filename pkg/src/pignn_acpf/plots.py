"""Figures written straight to files (non-interactive backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_bench(records, path, title: str | None = None):
    """Median wall time per scenario against grid size, log-log, one line per solver and batching."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    series: dict[str, list[tuple[int, float]]] = {}
    for r in records:
        label = f"{r.solver} ({r.regime}"
        label += ", batch-1)" if r.regime == "multi" and r.solver != "NR" and r.micro_batch == 1 else ")"
        series.setdefault(label, []).append((r.n, r.median_seconds / r.scenarios))
    for label, points in sorted(series.items()):
        points.sort()
        ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("buses per grid")
    ax.set_ylabel("median seconds per scenario")
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training(history, path):
    """Train and validation loss per epoch on a log scale."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    epochs = [r.epoch for r in history]
    ax.plot(epochs, [r.train_loss for r in history], label="train")
    ax.plot(epochs, [r.val_loss for r in history], label="validation")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("physics loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
