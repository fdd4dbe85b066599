"""Matplotlib figure rendering for reports, sweeps, comparisons, and dynamics.

All functions write PNG files and return the written path; they never open
interactive windows (Agg backend).
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import EmptyInput
from .metrics import MetricsRecord


def save_accuracy_figure(records: list[MetricsRecord], path: str | Path) -> Path:
    """Grouped bars: standard accuracy, with adversarial accuracy as points."""
    if not records:
        raise EmptyInput("no records to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [r.run_id or f"row{i}" for i, r in enumerate(records)]
    std = [100.0 * r.std_acc for r in records]
    adv = [None if r.adv_acc is None else 100.0 * r.adv_acc for r in records]

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(records)), 4))
    xs = range(len(records))
    ax.bar(xs, std, color="#4878a8", label="Std Acc")
    adv_xs = [x for x, a in zip(xs, adv) if a is not None]
    adv_ys = [a for a in adv if a is not None]
    if adv_ys:
        ax.plot(adv_xs, adv_ys, "r*--", markersize=10, label="Adv Acc")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_sweep_figure(rows, path: str | Path) -> Path:
    """Improvement rate vs loosening factor: std solid/circles, adv dotted/asterisks."""
    if not rows:
        raise EmptyInput("no sweep rows to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ts = [row.T for row in rows]
    std = [None if row.std_improvement is None else 100.0 * row.std_improvement for row in rows]
    adv = [None if row.adv_improvement is None else 100.0 * row.adv_improvement for row in rows]

    fig, ax = plt.subplots(figsize=(6, 4))
    pts = [(t, v) for t, v in zip(ts, std) if v is not None]
    if pts:
        ax.plot(*zip(*pts), "o-", color="#4878a8", label="Std Acc improvement")
    pts = [(t, v) for t, v in zip(ts, adv) if v is not None]
    if pts:
        ax.plot(*zip(*pts), "*:", color="#b04848", markersize=10, label="Adv Acc improvement")
    ax.axhline(0.0, color="gray", linewidth=0.8)
    ax.set_xlabel("loosening factor T (T=1 is the zero-point baseline)")
    ax.set_ylabel("improvement over T=1 (%)")
    ax.set_xticks(ts)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_compare_figure(rows, path: str | Path) -> Path:
    """Bars for mean epoch time, line for peak memory, per strategy combo."""
    if not rows:
        raise EmptyInput("no comparison rows to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels = [row.label for row in rows]
    times = [row.mean_epoch_time_s for row in rows]
    mems = [row.peak_memory_bytes / 1e6 for row in rows]

    fig, ax = plt.subplots(figsize=(6.5, 4))
    xs = range(len(rows))
    ax.bar(xs, times, color="#4878a8", label="time / epoch (s)")
    ax.set_ylabel("mean epoch time (s)")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=15, ha="right", fontsize=9)
    ax2 = ax.twinx()
    ax2.plot(list(xs), mems, "r^-", label="peak memory (MB)")
    ax2.set_ylabel("peak memory (MB)")
    handles1, names1 = ax.get_legend_handles_labels()
    handles2, names2 = ax2.get_legend_handles_labels()
    ax.legend(handles1 + handles2, names1 + names2, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_dynamics_figure(dynamics_paths: dict[str, str | Path], path: str | Path) -> Path:
    """Loss and true-class confidence over epochs, one curve set per run.

    `dynamics_paths` maps a display label to a dynamics.jsonl file.
    """
    if not dynamics_paths:
        raise EmptyInput("no dynamics files to plot")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_loss, ax_conf) = plt.subplots(1, 2, figsize=(10, 4))
    for label, jsonl_path in dynamics_paths.items():
        epochs, losses, confs = [], [], []
        with open(jsonl_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                epochs.append(rec["epoch"])
                losses.append(rec["train_loss"])
                confs.append(rec["mean_confidence"])
        ax_loss.plot(epochs, losses, label=label)
        ax_conf.plot(epochs, confs, label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_conf.set_xlabel("epoch")
    ax_conf.set_ylabel("mean true-class confidence")
    ax_conf.set_ylim(0, 1)
    ax_loss.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
