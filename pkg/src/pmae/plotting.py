"""Figures from run directories: A_t curves with seed-spread bands and an A_bar bar chart."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .rundir import load_metrics  # noqa: E402

# PNG metadata carries the matplotlib version by default; drop it for byte-stable output.
_PNG_META = {"Software": None}


class PlotError(ValueError):
    pass


def run_label(metrics: dict) -> str:
    if metrics["method"] != "pmae":
        return metrics["method"]
    return "pmae" if metrics["ablate"] == "none" else f"pmae/{metrics['ablate']}"


def curve_data(run_dirs) -> list[dict]:
    """Per run: label, stage axis, per-seed A_t rows, mean/min/max over seeds and A_bar values."""
    out = []
    T = None
    for d in run_dirs:
        m = load_metrics(d)
        rows = [m["seeds"][s]["A_t"] for s in m["seeds"]]
        lengths = {len(r) for r in rows}
        if len(lengths) != 1:
            raise PlotError(f"{d}: seeds disagree on the number of tasks")
        t = lengths.pop()
        if T is not None and t != T:
            raise PlotError(f"{d}: {t} tasks, other runs have {T}")
        T = t
        arr = np.asarray(rows, dtype=float)
        out.append(
            {
                "run": str(d),
                "label": run_label(m),
                "stages": list(range(1, t + 1)),
                "seeds": list(m["seeds"]),
                "A_t": rows,
                "mean": m["summary"]["A_t_mean"],
                "low": arr.min(axis=0).tolist(),
                "high": arr.max(axis=0).tolist(),
                "A_bar": [m["seeds"][s]["A_bar"] for s in m["seeds"]],
                "A_bar_mean": m["summary"]["A_bar_mean"],
            }
        )
    if not out:
        raise PlotError("no run directories given")
    return out


def plot_runs(run_dirs, out_dir) -> list[Path]:
    """Write ``accuracy_curves.png``, ``average_accuracy.png`` and the plotted numbers as JSON."""
    data = curve_data(run_dirs)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, d in enumerate(data):
        color = f"C{i % 10}"
        ax.plot(d["stages"], d["mean"], marker="o", color=color, label=d["label"])
        if len(d["seeds"]) > 1:
            ax.fill_between(d["stages"], d["low"], d["high"], color=color, alpha=0.2, linewidth=0)
    ax.set_xlabel("task")
    ax.set_ylabel("A_t")
    ax.set_xticks(data[0]["stages"])
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    curves = out / "accuracy_curves.png"
    fig.savefig(curves, dpi=100, metadata=_PNG_META)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels = [d["label"] for d in data]
    means = [d["A_bar_mean"] for d in data]
    err = [[m - min(d["A_bar"]) for m, d in zip(means, data)], [max(d["A_bar"]) - m for m, d in zip(means, data)]]
    ax.bar(range(len(data)), means, yerr=err, color=[f"C{i % 10}" for i in range(len(data))], capsize=3)
    ax.set_xticks(range(len(data)))
    ax.set_xticklabels(labels, rotation=20, fontsize=8)
    ax.set_ylabel("A_bar")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    bars = out / "average_accuracy.png"
    fig.savefig(bars, dpi=100, metadata=_PNG_META)
    plt.close(fig)

    table = out / "plot_data.json"
    table.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return [curves, bars, table]
