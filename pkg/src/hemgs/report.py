"""Figures and delimited row output for the command-line reports.

All plots go through the non-interactive Agg backend and are written straight
to files; nothing here opens a window.
"""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("kv", "tsv", "table")

_STYLE = {
    "figure.figsize": (6.0, 3.8),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


def format_rows(rows, fmt: str = "kv") -> str:
    """Render ``(key, value)`` pairs as key=value lines, TSV, or an aligned table."""
    rows = [(str(k), format_value(v)) for k, v in rows]
    if fmt == "kv":
        lines = [f"{k}={v}" for k, v in rows]
    elif fmt == "tsv":
        lines = [f"{k}\t{v}" for k, v in rows]
    elif fmt == "table":
        width = max((len(k) for k, _ in rows), default=0)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def format_records(header, records, fmt: str = "tsv") -> str:
    """Render a list of equal-length tuples under ``header``.

    ``kv`` mode prefixes each field with its column name so every line stays
    self-describing.
    """
    header = [str(h) for h in header]
    cells = [[format_value(v) for v in r] for r in records]
    if fmt == "kv":
        lines = [" ".join(f"{h}={c}" for h, c in zip(header, row)) for row in cells]
    elif fmt == "tsv":
        lines = ["\t".join(header)] + ["\t".join(row) for row in cells]
    elif fmt == "table":
        widths = [max([len(h)] + [len(r[i]) for r in cells]) for i, h in enumerate(header)]
        lines = ["  ".join(h.rjust(w) for h, w in zip(header, widths))]
        lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    else:
        raise ValueError(f"unknown output format {fmt!r}")
    return "\n".join(lines) + "\n"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_storage(columns: dict, path, title: str = "Storage breakdown") -> Path:
    """Bar chart of bytes per stream component, with the total drawn as a line."""
    parts = {k: float(v) for k, v in columns.items() if k != "Total"}
    total = float(columns.get("Total", sum(parts.values())))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        names = list(parts)
        vals = [parts[k] / 1024 for k in names]
        bars = ax.bar(names, vals, color="#4C72B0")
        for b, v in zip(bars, parts.values()):
            share = 100 * v / total if total else 0.0
            ax.annotate(f"{share:.1f}%", (b.get_x() + b.get_width() / 2, b.get_height()),
                        ha="center", va="bottom", fontsize=8)
        ax.axhline(total / 1024, color="0.4", ls="--", lw=1, label=f"total {total / 1024:.1f} KiB")
        ax.set_ylabel("KiB")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_rd(curves: dict, path, title: str = "Rate-distortion") -> Path:
    """``curves`` maps a label to ``(bytes, distortion)`` sequences."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for label, (size, dist) in curves.items():
            order = np.argsort(size)
            ax.plot(np.asarray(size, float)[order] / 1024, np.asarray(dist, float)[order],
                    marker="o", ms=4, label=label)
        ax.set_xlabel("compressed size (KiB)")
        ax.set_ylabel("weighted distortion")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_training(log, path, title: str = "Training loss") -> Path:
    """Loss, distortion and rate per iteration from a :class:`TrainLog`."""
    rows = np.asarray([r[:1] + r[2:] for r in log.rows], dtype=np.float64).reshape(-1, 4)
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.4))
        if rows.size:
            it = rows[:, 0]
            window = max(1, len(it) // 50)
            kernel = np.ones(window) / window

            def smooth(y):
                return np.convolve(y, kernel, mode="valid")

            xs = it[window - 1:]
            ax1.plot(xs, smooth(rows[:, 3]), label="total")
            ax1.plot(xs, smooth(rows[:, 1]), label="distortion")
            ax2.plot(xs, smooth(rows[:, 2]), color="#C44E52")
        ax1.set_xlabel("iteration")
        ax1.set_yscale("log")
        ax1.set_title(title)
        ax1.legend(frameon=False)
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("bits per anchor")
        ax2.set_title("Rate")
        return _save(fig, path)


def plot_context_histogram(counts, n: int, path, title: str = "Context sizes") -> Path:
    counts = np.asarray(counts, dtype=np.int64)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.hist(counts, bins=np.arange(-0.5, n + 1.5, 1.0), color="#55A868", edgecolor="white")
        ax.axvline(n, color="0.3", ls="--", lw=1, label=f"cap n={n}")
        ax.set_xlabel("selected neighbours")
        ax.set_ylabel("anchors")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_bench(results: dict, path, baseline: dict | None = None,
               title: str = "Codec throughput") -> Path:
    keys = ["encode_anchors_per_s", "decode_anchors_per_s"]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(keys))
        ax.bar(x - 0.2, [results[k] for k in keys], 0.4, label="current")
        if baseline:
            ax.bar(x + 0.2, [baseline.get(k, 0.0) for k in keys], 0.4, label="baseline")
        ax.set_xticks(x, ["encode", "decode"])
        ax.set_ylabel("anchors / s")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)
