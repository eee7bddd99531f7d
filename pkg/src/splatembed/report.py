"""Delimited tables, aligned console tables and matplotlib figures for run reports."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_delimited(rows: list[dict], path, delimiter: str = "\t", fields=None) -> Path:
    """Write rows as a delimited table; ``fields`` gives the header when rows may be empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fields is None:
        fields = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, delimiter=delimiter, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_table(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)"
    keys = list(rows[0].keys())
    cells = [[_fmt(r.get(k, "")) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    # Numbers align right, text aligns left.
    numeric = [all(isinstance(r.get(k), (int, float, np.number)) for r in rows) for k in keys]
    lines = ["  ".join(k.rjust(w) if n else k.ljust(w) for k, w, n in zip(keys, widths, numeric))]
    lines.append("  ".join("-" * w for w in widths))
    for c in cells:
        lines.append("  ".join(v.rjust(w) if n else v.ljust(w) for v, w, n in zip(c, widths, numeric)))
    return "\n".join(lines)


def format_kv(values: dict) -> str:
    return "\n".join(f"{k}={_fmt(v)}" for k, v in values.items())


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_worker_breakdown(stats, path) -> Path:
    """Stacked per-worker bars of I/O, rasterization, masking and aggregation time."""
    plt = _pyplot()
    workers = stats.workers
    ranks = np.arange(len(workers))
    parts = [
        ("io", [w.io_s for w in workers]),
        ("rasterize", [w.rasterize_s for w in workers]),
        ("masking", [w.masking_s for w in workers]),
        ("aggregate", [w.aggregate_s for w in workers]),
    ]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(workers) + 3), 3.2))
    bottom = np.zeros(len(workers))
    for name, vals in parts:
        ax.bar(ranks, vals, bottom=bottom, label=name, width=0.7)
        bottom += np.asarray(vals)
    ax.set_xticks(ranks)
    ax.set_xlabel("worker")
    ax.set_ylabel("seconds")
    ax.set_title(f"encode time per worker (phase 1 {stats.phase1_s:.2f}s, phase 2 {stats.phase2_s:.2f}s)", fontsize=9)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_scaling(runs, path) -> Path:
    plt = _pyplot()
    workers = np.array([r.workers for r in runs])
    secs = np.array([r.seconds for r in runs])
    base = secs[workers == workers.min()][0]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    a1.plot(workers, secs, "o-")
    a1.set_xlabel("workers")
    a1.set_ylabel("encode seconds")
    a2.plot(workers, base / secs, "o-", label="measured")
    a2.plot(workers, workers / workers.min(), "--", color="gray", label="linear")
    a2.set_xlabel("workers")
    a2.set_ylabel("speedup")
    a2.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_query_latency(runs, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for mode in sorted({r.mode for r in runs}):
        sel = [r for r in runs if r.mode == mode]
        ax.plot([r.store_size for r in sel], [r.seconds for r in sel], "o-", label=mode)
    ax.set_xscale("log")
    ax.set_xlabel("store size (records)")
    ax.set_ylabel("query seconds")
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_class_scores(scores, names, path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(scores.class_ids) + 2), 3))
    x = np.arange(len(scores.class_ids))
    ax.bar(x - 0.2, scores.iou, width=0.4, label="IoU")
    ax.bar(x + 0.2, scores.acc, width=0.4, label="accuracy")
    ax.set_xticks(x)
    ax.set_xticklabels([names[c] if c < len(names) else str(c) for c in scores.class_ids], rotation=45, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8, frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
