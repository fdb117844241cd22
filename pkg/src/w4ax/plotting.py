"""Figures written next to the CLI's tabular output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"W4A8": "#e3b505", "W4A4": "#4f9d69"}

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
    }
)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_timeline(report, precision_of, path, title=""):
    """Gantt chart of one simulation; hatched bars are stolen work."""
    S = report.config.num_sms
    fig, ax = plt.subplots(figsize=(6, 0.45 * S + 1))
    for e in report.events:
        prec = precision_of(e.task_id)
        ax.barh(
            e.sm,
            float(e.end - e.start),
            left=float(e.start),
            color=COLORS[prec],
            edgecolor="k",
            linewidth=0.5,
            hatch="//" if e.stolen else None,
        )
        ax.text(float(e.start + e.end) / 2, e.sm, str(e.task_id), ha="center", va="center", fontsize=6)
    ax.axvline(float(report.makespan), color="r", linestyle="--", linewidth=0.8)
    ax.set_yticks(range(S))
    ax.set_yticklabels([f"SM{i}" for i in range(S)])
    ax.invert_yaxis()
    ax.set_xlabel("time (INT4 tile units)")
    ax.set_title(title or f"makespan {float(report.makespan):g}")
    return _save(fig, path)


def plot_strategies(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    names = [r.name for r in rows]
    ax.bar(names, [r.speedup for r in rows], color="#5b7db1")
    for i, r in enumerate(rows):
        ax.text(i, r.speedup, f"{r.speedup:.2f}x", ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("speedup vs uniform W4A8")
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, path)


def plot_channel_scores(report, k, path):
    """Per-channel maxabs with the outlier threshold (log scale)."""
    fig, ax = plt.subplots(figsize=(6, 2.5))
    score = np.asarray(report.channel_score)
    idx = np.arange(len(score))
    ax.plot(idx, score, lw=0.6, color="0.3")
    ax.scatter(idx[report.outlier_flags], score[report.outlier_flags], s=8, color="r", zorder=3)
    ax.axhline(report.threshold_factor * report.median_score, color="r", ls="--", lw=0.8)
    for b in range(0, len(score), k):
        ax.axvline(b, color="0.85", lw=0.5, zorder=0)
    ax.set_yscale("log")
    ax.set_xlabel("channel")
    ax.set_ylabel("calibration maxabs")
    return _save(fig, path)


def plot_forward_errors(steps, errors, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, errors, marker="o", ms=3)
    ax.set_xlabel("generation step (0 = prefill)")
    ax.set_ylabel("relative error vs float64")
    ax.set_ylim(bottom=0)
    return _save(fig, path)


def plot_footprint(seq_lens, kv4_bytes, fp16_bytes, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(seq_lens, np.asarray(fp16_bytes) / 1024, label="FP16 payload")
    ax.plot(seq_lens, np.asarray(kv4_bytes) / 1024, label="KV4 payload + params")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("KiB")
    ax.legend()
    return _save(fig, path)
