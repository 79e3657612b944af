"""Detection and topology metrics: Fréchet matching, AP/mAP, A@1, TOP_ll, TOP_lt, OLS."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .scene import LIGHT_CATEGORIES, TrafficElement

THRESHOLDS = (1.0, 2.0, 3.0)


def discrete_frechet(p, q) -> float:
    """Discrete Fréchet distance between two polylines under the Euclidean metric."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("polylines must be non-empty")
    dist = np.linalg.norm(p[:, None, :] - q[None, :, :], axis=-1)
    n, m = dist.shape
    ca = np.empty((n, m))
    ca[0, 0] = dist[0, 0]
    for i in range(1, n):
        ca[i, 0] = max(ca[i - 1, 0], dist[i, 0])
    for j in range(1, m):
        ca[0, j] = max(ca[0, j - 1], dist[0, j])
    for i in range(1, n):
        for j in range(1, m):
            ca[i, j] = max(min(ca[i - 1, j], ca[i, j - 1], ca[i - 1, j - 1]), dist[i, j])
    return float(ca[-1, -1])


def frechet_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise discrete Fréchet distances; the recurrence runs vectorized over all pairs."""
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    P = np.stack([np.asarray(x, dtype=np.float64) for x in preds])
    G = np.stack([np.asarray(x, dtype=np.float64) for x in gts])
    dist = np.linalg.norm(P[:, None, :, None, :] - G[None, :, None, :, :], axis=-1)
    n, m = dist.shape[2], dist.shape[3]
    ca = np.empty_like(dist)
    ca[..., 0, 0] = dist[..., 0, 0]
    for i in range(1, n):
        ca[..., i, 0] = np.maximum(ca[..., i - 1, 0], dist[..., i, 0])
    for j in range(1, m):
        ca[..., 0, j] = np.maximum(ca[..., 0, j - 1], dist[..., 0, j])
    for i in range(1, n):
        for j in range(1, m):
            best = np.minimum(np.minimum(ca[..., i - 1, j], ca[..., i, j - 1]), ca[..., i - 1, j - 1])
            ca[..., i, j] = np.maximum(best, dist[..., i, j])
    return ca[..., -1, -1]


@dataclass
class MatchResult:
    threshold: float
    pairs: list[tuple[int, int]]
    unmatched_pred: list[int]
    unmatched_gt: list[int]

    def pred_to_gt(self) -> dict[int, int]:
        return dict(self.pairs)

    def gt_to_pred(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}


def match_instances(confidences, distances: np.ndarray, threshold: float) -> MatchResult:
    """Greedy matching in descending confidence order.

    Each prediction claims the nearest still-unmatched ground truth whose
    distance is within ``threshold``. Ties break on prediction index, then on
    ground-truth index.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    conf = np.asarray(confidences, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    if distances.ndim != 2 or distances.shape[0] != len(conf):
        raise ValueError("distances must have one row per prediction")
    n_gt = distances.shape[1]
    order = sorted(range(len(conf)), key=lambda i: (-conf[i], i))
    taken = np.zeros(n_gt, dtype=bool)
    pairs = []
    unmatched_pred = []
    for i in order:
        best, best_d = -1, math.inf
        for g in range(n_gt):
            d = distances[i, g]
            if not taken[g] and d <= threshold and d < best_d:
                best, best_d = g, d
        if best < 0:
            unmatched_pred.append(i)
        else:
            taken[best] = True
            pairs.append((i, best))
    return MatchResult(threshold, pairs, sorted(unmatched_pred), [g for g in range(n_gt) if not taken[g]])


def ap_from_ranking(confidences, hits, n_gt: int) -> float:
    """Area under the interpolated precision/recall curve of a pooled ranking."""
    if n_gt <= 0:
        return 0.0
    conf = np.asarray(confidences, dtype=np.float64)
    hits = np.asarray(hits, dtype=bool)
    if len(conf) == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    ranked = hits[order]
    tp = np.cumsum(ranked)
    precision = tp / np.arange(1, len(ranked) + 1)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    # recall steps by exactly 1/n_gt at each hit; summing per hit keeps a perfect ranking at 1.0
    return float(np.sum(interp[ranked]) / n_gt)


def vertex_ap(scores, positives) -> float:
    """Average precision of one vertex's ranked neighbor list (ties keep index order)."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks)) * len(ranks) / n_pos


# ---------------------------------------------------------------- scene-level records


@dataclass
class ScenePrediction:
    centerlines: list[np.ndarray]
    categories: list[str]
    confidences: np.ndarray
    edge_scores: np.ndarray  # (P, P)
    elements: list[TrafficElement] = field(default_factory=list)
    element_confidences: np.ndarray | None = None


@dataclass
class SceneTruth:
    centerlines: list[np.ndarray]
    categories: list[str]
    adjacency: np.ndarray  # (G, G) bool
    elements: list[TrafficElement] = field(default_factory=list)


def truth_from_sample(sample) -> SceneTruth:
    sc = sample.scene
    return SceneTruth(
        [ln.centerline.points for ln in sc.lanes],
        [ln.category for ln in sc.lanes],
        sc.adjacency(),
        list(sample.traffic_elements),
    )


def prediction_from_truth(truth: SceneTruth) -> ScenePrediction:
    """Ground truth dressed up as a perfect prediction (confidence 1 everywhere)."""
    return ScenePrediction(
        centerlines=list(truth.centerlines),
        categories=list(truth.categories),
        confidences=np.ones(len(truth.centerlines)),
        edge_scores=truth.adjacency.astype(np.float64),
        elements=list(truth.elements),
        element_confidences=np.ones(len(truth.elements)),
    )


def average_precision(preds: Sequence[ScenePrediction], truths: Sequence[SceneTruth], threshold: float, distances=None) -> float:
    """Class-agnostic AP pooled over scenes."""
    conf, hits, n_gt = [], [], 0
    for k, (pr, gt) in enumerate(zip(preds, truths)):
        d = distances[k] if distances is not None else frechet_matrix(pr.centerlines, gt.centerlines)
        m = match_instances(pr.confidences, d, threshold)
        matched = {p for p, _ in m.pairs}
        conf.extend(pr.confidences.tolist())
        hits.extend(i in matched for i in range(len(pr.confidences)))
        n_gt += len(gt.centerlines)
    return ap_from_ranking(conf, hits, n_gt)


def mean_ap(preds: Sequence[ScenePrediction], truths: Sequence[SceneTruth], threshold: float, distances=None) -> float:
    """Per-category AP averaged over categories that occur in the ground truth."""
    present = sorted({c for gt in truths for c in gt.categories})
    if not present:
        return 0.0
    aps = []
    for c in present:
        conf, hits, n_gt = [], [], 0
        for k, (pr, gt) in enumerate(zip(preds, truths)):
            pi = [i for i, pc in enumerate(pr.categories) if pc == c]
            gi = [j for j, gc in enumerate(gt.categories) if gc == c]
            n_gt += len(gi)
            if not pi:
                continue
            if distances is not None:
                d = distances[k][np.ix_(pi, gi)] if gi else np.zeros((len(pi), 0))
            else:
                d = frechet_matrix([pr.centerlines[i] for i in pi], [gt.centerlines[j] for j in gi])
            m = match_instances(pr.confidences[pi], d, threshold)
            matched = {p for p, _ in m.pairs}
            conf.extend(pr.confidences[pi].tolist())
            hits.extend(i in matched for i in range(len(pi)))
        aps.append(ap_from_ranking(conf, hits, n_gt))
    return float(np.mean(aps))


def edge_accuracy_counts(pred_edges: np.ndarray, gt_adj: np.ndarray, match: MatchResult) -> tuple[int, int]:
    """(correct, total) over ordered GT lane pairs; pairs touching an unmatched lane are wrong."""
    g2p = match.gt_to_pred()
    n = gt_adj.shape[0]
    correct = 0
    for i in range(n):
        for j in range(n):
            if i == j or i not in g2p or j not in g2p:
                continue
            if bool(pred_edges[g2p[i], g2p[j]]) == bool(gt_adj[i, j]):
                correct += 1
    return correct, n * (n - 1)


def edge_accuracy(pred_edges: np.ndarray, gt_adj: np.ndarray, match: MatchResult) -> float:
    correct, total = edge_accuracy_counts(pred_edges, gt_adj, match)
    return correct / total if total else 0.0


def top_ll_vertices(edge_scores: np.ndarray, gt_adj: np.ndarray, match: MatchResult) -> list[float]:
    """Vertex APs for every GT lane with at least one successor."""
    g2p = match.gt_to_pred()
    p2g = match.pred_to_gt()
    n_pred = edge_scores.shape[0]
    out = []
    for g in range(gt_adj.shape[0]):
        succ = set(np.flatnonzero(gt_adj[g]).tolist())
        if not succ:
            continue
        if g not in g2p:
            out.append(0.0)
            continue
        p = g2p[g]
        cands = [c for c in range(n_pred) if c != p]
        scores = [edge_scores[p, c] for c in cands]
        positives = [p2g.get(c, -1) in succ for c in cands]
        n_pos = len(succ)
        # successors that were never detected still count in the denominator
        ap = vertex_ap(scores, positives) * (sum(positives) / n_pos) if sum(positives) else 0.0
        out.append(ap)
    return out


def top_ll(edge_scores: np.ndarray, gt_adj: np.ndarray, match: MatchResult) -> tuple[float, bool]:
    """Mean vertex AP over lanes with successors; ``(0.0, False)`` when undefined."""
    v = top_ll_vertices(edge_scores, gt_adj, match)
    return (float(np.mean(v)), True) if v else (0.0, False)


def top_lt_vertices(pred: ScenePrediction, truth: SceneTruth, match: MatchResult) -> list[float]:
    """Lane-to-element vertex APs; a predicted pair exists when the categories agree."""
    elems = [e for e in truth.elements if e.category not in LIGHT_CATEGORIES]
    if not elems:
        return []
    g2p = match.gt_to_pred()
    out = []
    for g, gc in enumerate(truth.categories):
        positives = [e.category == gc for e in elems]
        if not any(positives):
            continue
        if g not in g2p:
            out.append(0.0)
            continue
        p = g2p[g]
        scores = [pred.confidences[p] if pred.categories[p] == e.category else 0.0 for e in elems]
        hit_scores = [s > 0 for s in scores]
        # pairs predicted as unconnected are never retrieved
        ranked_pos = [pos and h for pos, h in zip(positives, hit_scores)]
        if not any(ranked_pos):
            out.append(0.0)
            continue
        out.append(vertex_ap(scores, ranked_pos) * sum(ranked_pos) / sum(positives))
    return out


def top_lt(pred: ScenePrediction, truth: SceneTruth, match: MatchResult) -> tuple[float, bool]:
    v = top_lt_vertices(pred, truth, match)
    return (float(np.mean(v)), True) if v else (0.0, False)


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def det_t(preds: Sequence[ScenePrediction], truths: Sequence[SceneTruth], iou_threshold: float = 0.5) -> float:
    """Traffic-element mAP over categories, matching boxes greedily at IoU >= threshold."""
    present = sorted({e.category for t in truths for e in t.elements})
    if not present:
        return 0.0
    aps = []
    for c in present:
        conf, hits, n_gt = [], [], 0
        for pr, gt in zip(preds, truths):
            gi = [e for e in gt.elements if e.category == c]
            n_gt += len(gi)
            pc = pr.element_confidences if pr.element_confidences is not None else np.ones(len(pr.elements))
            pi = [(k, e) for k, e in enumerate(pr.elements) if e.category == c]
            if not pi:
                continue
            # 1 - IoU as a distance so the Fréchet matcher can be reused
            d = np.array([[1.0 - _iou(e.bbox, g.bbox) for g in gi] for _, e in pi]).reshape(len(pi), len(gi))
            m = match_instances([pc[k] for k, _ in pi], d, 1.0 - iou_threshold + 1e-12)
            matched = {p for p, _ in m.pairs}
            conf.extend(pc[k] for k, _ in pi)
            hits.extend(i in matched for i in range(len(pi)))
        aps.append(ap_from_ranking(conf, hits, n_gt))
    return float(np.mean(aps))


def ols(det_l: float, det_t: float, top_ll: float, top_lt: float) -> float:
    """OpenLane-V2 score: detection terms averaged with square-rooted topology terms."""
    for name, v in (("det_l", det_l), ("det_t", det_t), ("top_ll", top_ll), ("top_lt", top_lt)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    return 0.25 * (det_l + det_t + math.sqrt(top_ll) + math.sqrt(top_lt))


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    ap: dict[float, float]
    map_per_class: dict[float, float]
    a_at_1: dict[float, float]
    det_l: float
    det_t: float
    top_ll: float
    top_lt: float
    ols: float
    top_ll_defined: bool = True
    top_lt_defined: bool = True
    lights_excluded: int = 0
    n_scenes: int = 0
    edge_threshold: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("ap", "map_per_class", "a_at_1"):
            d[k] = {f"{t:.1f}": v for t, v in d[k].items()}
        return d

    def table(self) -> str:
        head = f"{'DET_l':>8} {'DET_t':>8} {'TOP_ll':>8} {'TOP_lt':>8} {'OLS':>8}"
        row = f"{self.det_l:8.4f} {self.det_t:8.4f} {self.top_ll:8.4f} {self.top_lt:8.4f} {self.ols:8.4f}"
        ths = sorted(self.ap)
        head2 = " ".join(f"{'AP_' + f'{t:.1f}':>8}" for t in ths) + " " + " ".join(f"{'mAP_' + f'{t:.1f}':>8}" for t in ths) + " " + " ".join(f"{'A@1_' + f'{t:.1f}':>8}" for t in ths)
        row2 = " ".join(f"{self.ap[t]:8.4f}" for t in ths) + " " + " ".join(f"{self.map_per_class[t]:8.4f}" for t in ths) + " " + " ".join(f"{self.a_at_1[t]:8.4f}" for t in ths)
        notes = []
        if not self.top_ll_defined:
            notes.append("TOP_ll undefined (no GT lane successors); reported as 0")
        if not self.top_lt_defined:
            notes.append("TOP_lt undefined (no signal elements); reported as 0")
        if self.lights_excluded:
            notes.append(f"{self.lights_excluded} traffic-light elements excluded from TOP_lt")
        return "\n".join([head, row, head2, row2, *notes])


def evaluate_predictions(
    preds: Sequence[ScenePrediction],
    truths: Sequence[SceneTruth],
    edge_threshold: float = 0.5,
    thresholds: Sequence[float] = THRESHOLDS,
) -> EvalReport:
    if len(preds) != len(truths):
        raise ValueError("need one prediction per scene")
    distances = [frechet_matrix(p.centerlines, t.centerlines) for p, t in zip(preds, truths)]
    ap, mp, acc = {}, {}, {}
    ll_vertices, lt_vertices = [], []
    for th in thresholds:
        ap[th] = average_precision(preds, truths, th, distances)
        mp[th] = mean_ap(preds, truths, th, distances)
        correct = total = 0
        for k, (p, t) in enumerate(zip(preds, truths)):
            m = match_instances(p.confidences, distances[k], th)
            c, n = edge_accuracy_counts(p.edge_scores >= edge_threshold, t.adjacency, m)
            correct += c
            total += n
            ll_vertices.extend(top_ll_vertices(p.edge_scores, t.adjacency, m))
            lt_vertices.extend(top_lt_vertices(p, t, m))
        acc[th] = correct / total if total else 0.0
    dl = float(np.mean([ap[t] for t in thresholds]))
    dt = det_t(preds, truths)
    tll = float(np.mean(ll_vertices)) if ll_vertices else 0.0
    tlt = float(np.mean(lt_vertices)) if lt_vertices else 0.0
    return EvalReport(
        ap=ap,
        map_per_class=mp,
        a_at_1=acc,
        det_l=dl,
        det_t=dt,
        top_ll=tll,
        top_lt=tlt,
        ols=ols(dl, dt, tll, tlt),
        top_ll_defined=bool(ll_vertices),
        top_lt_defined=bool(lt_vertices),
        lights_excluded=sum(e.category in LIGHT_CATEGORIES for t in truths for e in t.elements),
        n_scenes=len(truths),
        edge_threshold=edge_threshold,
    )


def prediction_from_inference(inference, elements: Sequence[TrafficElement] = ()) -> ScenePrediction:
    lanes = inference.graph.lanes
    return ScenePrediction(
        centerlines=[ln.centerline.points for ln in lanes],
        categories=[ln.category for ln in lanes],
        confidences=np.asarray(inference.confidences, dtype=np.float64),
        edge_scores=np.asarray(inference.edge_scores, dtype=np.float64),
        elements=list(elements),
        element_confidences=np.ones(len(elements)),
    )


def evaluate_model(model, samples, edge_threshold: float = 0.5, node_threshold: float = 0.3) -> EvalReport:
    """Run factual inference on every sample and score it.

    Traffic elements are taken from the sample records, so DET_t only checks
    the bookkeeping of element categories.
    """
    from .model import infer

    preds = [
        prediction_from_inference(infer(model, s, edge_threshold, node_threshold), s.traffic_elements)
        for s in samples
    ]
    return evaluate_predictions(preds, [truth_from_sample(s) for s in samples], edge_threshold)
