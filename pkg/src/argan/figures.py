"""Matplotlib figures written alongside the delimited outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

__all__ = ["save_loss_curves", "save_metric_bars"]


def save_loss_curves(csv_path, out_path) -> Path:
    """Plot the loss columns of a training metrics log against iteration."""
    rows = list(csv.DictReader(open(csv_path, newline="")))
    if not rows:
        raise ValueError(f"metrics log {csv_path} is empty")
    iterations = [int(float(r["iteration"])) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for column, label in [
        ("d_loss", "discriminator"),
        ("g_adv", "generator (adversarial)"),
        ("g_prior", "center focus prior"),
        ("g_depth_reg", "stack consistency"),
    ]:
        values = [float(r[column]) for r in rows if r.get(column)]
        if values:
            ax.plot(iterations[: len(values)], values, label=label, linewidth=1)
    ax.set_xlabel("discriminator iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def save_metric_bars(report: MetricReport, out_path) -> Path:
    """Bar chart of a metric report, with std whiskers where available."""
    names = [e.name for e in report.entries]
    values = [e.value for e in report.entries]
    errors = [e.std if e.std else 0.0 for e in report.entries]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), values, yerr=errors, capsize=3, color="#4878cf")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("value")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
