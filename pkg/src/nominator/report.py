"""Figure rendering for training histories and evaluation reports.

Figures are written next to the CSV output so a run directory is
self-contained: curves for losses and validation accuracy, per-class
confidence-gap trajectories, and a per-class accuracy bar chart.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .dom import POSITIVE_CLASSES
from .evaluation import MetricReport

_CLASS_NAMES = [cls.name.lower() for cls in POSITIVE_CLASSES]


def _history_columns(records) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {
        "epoch": [], "train_loss": [], "val_loss": [], "val_nom_acc": [],
    }
    for name in _CLASS_NAMES:
        cols[f"conf_gap_{name}"] = []
    for rec in records:
        if isinstance(rec, dict):
            for key in cols:
                cols[key].append(rec[key])
        else:
            cols["epoch"].append(rec.epoch)
            cols["train_loss"].append(rec.train_loss)
            cols["val_loss"].append(rec.val_loss)
            cols["val_nom_acc"].append(rec.val_nom_acc)
            for cls, name in zip(POSITIVE_CLASSES, _CLASS_NAMES):
                cols[f"conf_gap_{name}"].append(rec.conf_gap[cls])
    return cols


def render_history_figures(records, out_dir: str | Path) -> list[Path]:
    """Write training_curves.png and confidence_gaps.png for an epoch history."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = _history_columns(records)
    epochs = cols["epoch"]

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, cols["train_loss"], label="train loss")
    ax_loss.plot(epochs, cols["val_loss"], label="validation loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend()
    ax_loss.grid(True, alpha=0.3)
    ax_acc.plot(epochs, cols["val_nom_acc"], color="tab:green")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation nomination accuracy")
    ax_acc.set_ylim(0.0, 1.05)
    ax_acc.grid(True, alpha=0.3)
    fig.tight_layout()
    curves = out / "training_curves.png"
    fig.savefig(curves, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for name in _CLASS_NAMES:
        ax.plot(epochs, cols[f"conf_gap_{name}"], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean confidence gap")
    ax.legend(ncol=3, fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    gaps = out / "confidence_gaps.png"
    fig.savefig(gaps, dpi=120)
    plt.close(fig)
    return [curves, gaps]


def render_metrics_figure(report: MetricReport, out_dir: str | Path) -> Path:
    """Bar chart of per-class nomination accuracy with the average marked."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    values = [report.per_class_accuracy[cls] or 0.0 for cls in POSITIVE_CLASSES]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(_CLASS_NAMES, values, color="tab:blue")
    ax.axhline(report.average_accuracy, color="tab:red", linestyle="--",
               label=f"average {report.average_accuracy:.3f}")
    ax.set_ylabel("nomination accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    path = out / "metrics.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
