"""Delimited tables and matplotlib figures for training and ablation reports."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("L_color", "L_eik", "L_dnc")


def write_table(rows: list[dict], path, delimiter: str = "\t") -> None:
    """Header plus one line per row; ``path`` may also be an open text stream."""
    if not rows:
        raise ValueError("no rows to write")

    def emit(fh):
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    if hasattr(path, "write"):
        emit(path)
    else:
        with open(path, "w", newline="") as fh:
            emit(fh)


def read_table(path, delimiter: str = "\t") -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh, delimiter=delimiter))


def plot_loss_curves(records: list[dict], path, title: str = "training losses") -> None:
    """One log-scale panel per loss term plus the sharpness s."""
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
    for ax, key in zip(axes, LOSS_KEYS + ("s",)):
        vals = [r[key] for r in records]
        ax.plot(steps, vals, lw=0.8)
        if key != "s" and min(vals, default=0) > 0:
            ax.set_yscale("log")
        ax.set_title(key)
        ax.set_xlabel("step")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_ablation(rows: list[dict], path, metrics=("chamfer", "rendered_normal_mae_deg")) -> None:
    """Side-by-side bar charts, one per metric, bars labelled by mode."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.5 * len(metrics), 3.4))
    axes = [axes] if len(metrics) == 1 else axes
    modes = [r["mode"] for r in rows]
    for ax, key in zip(axes, metrics):
        vals = [float(r[key]) for r in rows]
        bars = ax.bar(modes, vals, color=["#4c72b0", "#dd8452", "#55a868"][: len(rows)])
        ax.bar_label(bars, fmt="%.4g", fontsize=8)
        ax.set_title(key)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
