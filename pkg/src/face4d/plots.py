"""Static SVG figures for sequence statistics."""

from __future__ import annotations

import math

import matplotlib
from matplotlib.figure import Figure

from .metrics import CorrelationGraph

# stable element ids and no timestamps, so identical inputs give identical bytes
matplotlib.rcParams["svg.hashsalt"] = "face4d"
matplotlib.rcParams["svg.fonttype"] = "none"


def _graph_panel(ax, graph: CorrelationGraph):
    k = len(graph.regions)
    pos = {r: (math.cos(2 * math.pi * i / k), math.sin(2 * math.pi * i / k)) for i, r in enumerate(graph.regions)}
    for a, b, w in graph.edges:
        (x0, y0), (x1, y1) = pos[a], pos[b]
        ax.plot([x0, x1], [y0, y1], color="tab:gray", linewidth=1.0 + 4.0 * max(w, 0.0), zorder=1)
        ax.text((x0 + x1) / 2, (y0 + y1) / 2, f"{w:.2f}", fontsize=7, ha="center", va="center")
    for r, (x, y) in pos.items():
        c = graph.self_corr.get(r)
        label = r if c is None or math.isnan(c) else f"{r}\n{c:.2f}"
        color = "lightgray" if r in graph.degenerate else "tab:red"
        ax.scatter([x], [y], s=300, color=color, zorder=2)
        ax.text(x, y - 0.22, label, fontsize=7, ha="center", va="top")
    ax.set_xlim(-1.4, 1.4)
    ax.set_ylim(-1.5, 1.3)
    ax.set_aspect("equal")
    ax.axis("off")
    ax.set_title(f"region correlation (>= {graph.threshold:g})")


def stats_figure(velocities: list, graph: CorrelationGraph | None, path) -> None:
    """Write a three-panel SVG: per-sequence lip velocity, per-axis histograms, correlation graph.

    ``velocities`` holds one dict per sequence with keys ``name``, ``x``,
    ``y``, ``z`` and ``all``.
    """
    fig = Figure(figsize=(12, 4))
    ax0, ax1, ax2 = fig.subplots(1, 3)
    ax0.scatter(range(len(velocities)), [v["all"] for v in velocities], s=12)
    ax0.set_xlabel("sequence")
    ax0.set_ylabel("lip velocity (units / frame)")
    ax0.set_title("lip velocity per sequence")
    for axis in ("x", "y", "z"):
        ax1.hist([v[axis] for v in velocities], bins=10, alpha=0.5, label=axis)
    ax1.set_xlabel("lip velocity (units / frame)")
    ax1.set_ylabel("sequences")
    ax1.legend()
    ax1.set_title("per-axis lip velocity")
    if graph is not None:
        _graph_panel(ax2, graph)
    else:
        ax2.axis("off")
        ax2.set_title("region correlation (needs >= 3 frames)")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
