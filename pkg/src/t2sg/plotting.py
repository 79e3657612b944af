"""Bird's-eye-view drawings of scene graphs and report figures, written as SVG."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import FancyArrowPatch  # noqa: E402

from .scene import SceneGraph  # noqa: E402

CORRECT = "#2ca02c"
WRONG = "#d62728"
MISSING = "#1f77b4"
NEUTRAL = "#444444"

_SVG_RC = {"svg.hashsalt": "t2sg", "svg.fonttype": "none"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_SVG_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _axes(title: str | None):
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    return fig, ax


def _draw_lane(ax, pts: np.ndarray, color: str, gid: str, label: str | None) -> None:
    ax.plot(pts[:, 0], pts[:, 1], color=color, lw=1.6, gid=f"{gid}-line")
    tail, head = pts[-2, :2], pts[-1, :2]
    ax.add_patch(FancyArrowPatch(tail, head, arrowstyle="-|>", color=color, lw=1.6, mutation_scale=12, gid=gid))
    if label:
        mid = pts[len(pts) // 2]
        ax.text(mid[0], mid[1], label, fontsize=6, color=color, ha="center", va="bottom")


def _draw_edge(ax, a: np.ndarray, b: np.ndarray, color: str, gid: str, style: str = "--") -> None:
    ax.plot([a[0], b[0]], [a[1], b[1]], ls=style, color=color, lw=1.0, gid=gid)


def _limits(ax, graphs: Sequence[SceneGraph]) -> None:
    pts = [ln.centerline.points for g in graphs for ln in g.lanes]
    if not pts:
        ax.set_xlim(-30, 30)
        ax.set_ylim(-30, 30)
        return
    allp = np.concatenate(pts)
    lo, hi = allp[:, :2].min(axis=0) - 3, allp[:, :2].max(axis=0) + 3
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])


def plot_scene(graph: SceneGraph, path, title: str | None = None, labels: bool = True) -> Path:
    """Lanes as arrows from start to end, successor edges as dashed end-to-start connectors."""
    fig, ax = _axes(title)
    for i, ln in enumerate(graph.lanes):
        _draw_lane(ax, ln.centerline.points, NEUTRAL, f"lane-{i}", ln.category if labels else None)
    for i, j in sorted(graph.edges):
        _draw_edge(ax, graph.lanes[i].centerline.end, graph.lanes[j].centerline.start, NEUTRAL, f"edge-{i}-{j}")
    _limits(ax, [graph])
    return _save(fig, path)


def plot_comparison(
    pred: SceneGraph,
    truth: SceneGraph,
    pairs: Sequence[tuple[int, int]],
    path,
    title: str | None = None,
) -> Path:
    """Overlay a prediction on ground truth.

    Matched predicted lanes and edges present in the ground truth are green,
    unmatched predicted lanes and spurious edges are red, and ground-truth
    lanes or edges the prediction missed are blue.
    """
    p2g = dict(pairs)
    g2p = {g: p for p, g in pairs}
    fig, ax = _axes(title)
    for i, ln in enumerate(pred.lanes):
        color = CORRECT if i in p2g else WRONG
        _draw_lane(ax, ln.centerline.points, color, f"pred-lane-{i}", ln.category)
    for g, ln in enumerate(truth.lanes):
        if g not in g2p:
            _draw_lane(ax, ln.centerline.points, MISSING, f"gt-lane-{g}", ln.category)
    for i, j in sorted(pred.edges):
        hit = i in p2g and j in p2g and (p2g[i], p2g[j]) in truth.edges
        a, b = pred.lanes[i].centerline.end, pred.lanes[j].centerline.start
        _draw_edge(ax, a, b, CORRECT if hit else WRONG, f"pred-edge-{i}-{j}")
    for g, h in sorted(truth.edges):
        if g in g2p and h in g2p and (g2p[g], g2p[h]) in pred.edges:
            continue
        a, b = truth.lanes[g].centerline.end, truth.lanes[h].centerline.start
        _draw_edge(ax, a, b, MISSING, f"gt-edge-{g}-{h}", style=":")
    _limits(ax, [pred, truth])
    return _save(fig, path)


def plot_report(report, path) -> Path:
    """Bar chart of the summary scores next to AP/mAP/A@1 against the match threshold."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    names = ["DET_l", "DET_t", "TOP_ll", "TOP_lt", "OLS"]
    values = [report.det_l, report.det_t, report.top_ll, report.top_lt, report.ols]
    left.bar(names, values, color=NEUTRAL)
    left.set_ylim(0, 1.05)
    left.set_title("summary")
    ths = sorted(report.ap)
    right.plot(ths, [report.ap[t] for t in ths], "o-", label="AP")
    right.plot(ths, [report.map_per_class[t] for t in ths], "s-", label="mAP")
    right.plot(ths, [report.a_at_1[t] for t in ths], "^-", label="A@1")
    right.set_xlabel("Fréchet threshold [m]")
    right.set_ylim(0, 1.05)
    right.legend()
    right.set_title("per threshold")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss_curve(log: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [e["step"] for e in log]
    ax.plot(steps, [e["l_v"] for e in log], label="node loss")
    ax.plot(steps, [e["l_e"] for e in log], label="edge loss")
    ax.set_yscale("log")
    ax.set_xlabel("optimizer step")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
