"""Matplotlib renderings written next to JSON reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib import rcParams  # noqa: E402

rcParams.update(
    {
        "figure.figsize": (6.4, 4.0),
        "font.size": 10,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 120,
        "savefig.bbox": "tight",
    }
)

COLORS = ["#3498db", "#e74c3c", "#2ecc71", "#9b59b6", "#34495e"]


def plot_latencies(reports: list[dict], path) -> None:
    """Per-iteration latency traces, one line per report, with the mean dashed."""
    fig, ax = plt.subplots()
    for i, rep in enumerate(reports):
        color = COLORS[i % len(COLORS)]
        label = f"{rep['config']} {'fused' if rep['fused'] else 'unfused'}"
        ax.plot(range(1, len(rep["latencies_ms"]) + 1), rep["latencies_ms"], ".-", color=color, lw=0.8, label=label)
        ax.axhline(rep["mean_ms"], color=color, ls="--", lw=1)
    ax.set_xlabel("timed iteration")
    ax.set_ylabel("latency (ms)")
    ax.set_ylim(bottom=0)
    ax.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)


def plot_verification(result: dict, path) -> None:
    blocks = result["blocks"]
    names = [b["name"] for b in blocks]
    diffs = [max(b["max_abs_diff"], 1e-12) for b in blocks]
    colors = [COLORS[2] if b["pass"] else COLORS[1] for b in blocks]
    fig, ax = plt.subplots(figsize=(max(6.4, 0.18 * len(blocks)), 4.0))
    ax.bar(range(len(blocks)), diffs, color=colors)
    if blocks:
        ax.axhline(blocks[0]["tol"], color="k", ls="--", lw=1, label="tolerance")
    ax.set_yscale("log")
    ax.set_xticks(range(len(blocks)))
    ax.set_xticklabels(names, rotation=90, fontsize=6)
    ax.set_ylabel("max |fused - branchy|")
    ax.legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)


def plot_param_breakdown(per_part: dict[str, int], path, title: str = "") -> None:
    fig, ax = plt.subplots()
    parts = list(per_part)
    ax.barh(parts, [per_part[p] / 1e6 for p in parts], color=COLORS[0])
    ax.invert_yaxis()
    ax.set_xlabel("parameters (M)")
    if title:
        ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)
