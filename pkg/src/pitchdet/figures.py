"""Matplotlib figures rendered next to the delimited text reports.

Every report-producing command writes a machine-readable text file and a
PNG rendering of the same numbers: precision/recall curves for evaluation,
the loss trajectory for training, and the latency distribution for the
benchmark. The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import APReport, PRCurve  # noqa: E402
from .pipeline import BenchReport  # noqa: E402
from .training import LossLogRow  # noqa: E402


def _plot_curve(ax, curve: PRCurve, title: str, ap) -> None:
    precision, recall = curve.precision_recall()
    if len(precision):
        ax.plot(recall, precision, marker=".", linewidth=1.2)
    label = "AP absent" if ap is None else f"AP = {ap:.4f}"
    ax.set_title(f"{title} ({label})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)


def save_pr_figure(path, report: APReport) -> None:
    """Side-by-side ball and player precision/recall curves."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    _plot_curve(axes[0], report.ball_curve, "ball", report.ball_ap)
    _plot_curve(axes[1], report.player_curve, "player", report.player_ap)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_figure(path, rows: Sequence[LossLogRow]) -> None:
    """Per-epoch loss components on a log scale, one line per component."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    epochs = [row.epoch for row in rows]
    for attr in ("total", "ball", "player", "bbox"):
        values = [getattr(row, attr) for row in rows]
        ax.plot(epochs, values, label=attr, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if any(row.total > 0 for row in rows):
        ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_latency_figure(path, reports: Sequence[BenchReport]) -> None:
    """Per-iteration latency traces, one line per benchmarked input size."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for report in reports:
        label = f"{report.width}x{report.height} ({report.fps:.1f} fps)"
        ms = [latency * 1e3 for latency in report.latencies]
        ax.plot(range(1, len(ms) + 1), ms, marker=".", linewidth=1.0, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("latency (ms)")
    ax.set_ylim(bottom=0.0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
