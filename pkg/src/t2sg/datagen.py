"""Procedural traffic scenes, simulated detector output, and the JSONL dataset format."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .scene import (
    CATEGORY_INDEX,
    DEFAULT_POINTS,
    LANE_CATEGORIES,
    LIGHT_CATEGORIES,
    Centerline,
    Lane,
    SceneGraph,
    TrafficElement,
    validate,
)

FORMAT_VERSION = 1
KINDS = ("straight", "t_junction", "crossroad", "multiway")

LANE_WIDTH = 3.5
JUNCTION_RADIUS = 8.0
Z_RANGE = (-5.0, 5.0)


class DatasetError(ValueError):
    """A dataset line could not be decoded."""

    def __init__(self, line: int, field: str, reason: str):
        super().__init__(f"line {line}: field {field!r}: {reason}")
        self.line = line
        self.field = field


class DatasetVersionError(DatasetError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "crossroad"
    lanes_per_arm: int = 1
    noise_sigma: float = 0.15
    distractor_count: int = 4
    seed: int = 0
    bev_extent: tuple[tuple[float, float], tuple[float, float]] = ((-30.0, 30.0), (-30.0, 30.0))
    arms: int = 5  # only read for kind="multiway"
    segments: int = 2  # only read for kind="straight"
    n_points: int = DEFAULT_POINTS
    ramp_slope: float = 0.0
    feature_dim: int = 32
    feature_seed: int = 7
    n_lights: int = 1
    rotate: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 3 <= self.arms <= 6:
            raise ValueError("multiway arm count must lie in [3, 6]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.lanes_per_arm < 1 or self.segments < 1 or self.distractor_count < 0:
            raise ValueError("lanes_per_arm, segments must be >= 1 and distractor_count >= 0")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        (x0, x1), (y0, y1) = self.bev_extent
        if not (x1 > x0 and y1 > y0):
            raise ValueError("bev_extent ranges must be positive")
        object.__setattr__(
            self, "bev_extent", ((float(x0), float(x1)), (float(y0), float(y1)))
        )


# ---------------------------------------------------------------- geometry


def resample(poly: np.ndarray, n: int) -> np.ndarray:
    """Resample a dense polyline to ``n`` points equally spaced in arc length."""
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n)
    out = np.stack([np.interp(target, s, poly[:, k]) for k in range(poly.shape[1])], axis=1)
    out[0], out[-1] = poly[0], poly[-1]
    return out


def cubic_bezier(p0, p1, p2, p3, samples: int = 128) -> np.ndarray:
    t = np.linspace(0.0, 1.0, samples)[:, None]
    return (
        (1 - t) ** 3 * p0
        + 3 * (1 - t) ** 2 * t * p1
        + 3 * (1 - t) * t**2 * p2
        + t**3 * p3
    )


def _unit(theta: float) -> np.ndarray:
    return np.array([math.cos(theta), math.sin(theta)])


def heading_change(h0: np.ndarray, h1: np.ndarray) -> float:
    """Signed heading change in degrees, counter-clockwise (left) positive."""
    a = math.atan2(h1[1], h1[0]) - math.atan2(h0[1], h0[0])
    a = (a + math.pi) % (2 * math.pi) - math.pi
    deg = math.degrees(a)
    # a reversal lands on -180 or +180 depending on rounding; both are u-turns
    return 180.0 if deg <= -179.999 else deg


def turn_category(delta_deg: float) -> str:
    if abs(delta_deg) >= 150.0:
        return "u_turn"
    if abs(delta_deg) <= 10.0:
        return "go_straight"
    if delta_deg > 25.0:
        return "turn_left"
    if delta_deg < -25.0:
        return "turn_right"
    return "slight_left" if delta_deg > 0 else "slight_right"


@dataclass
class _Layout:
    polylines: list[np.ndarray] = field(default_factory=list)
    categories: list[str] = field(default_factory=list)
    edges: set[tuple[int, int]] = field(default_factory=set)

    def add(self, poly: np.ndarray, category: str) -> int:
        self.polylines.append(poly)
        self.categories.append(category)
        return len(self.polylines) - 1


def _straight_layout(spec: ScenarioSpec, rng: np.random.Generator) -> _Layout:
    lay = _Layout()
    seg_len = rng.uniform(12.0, 16.0)
    total = seg_len * spec.segments
    x0 = -total / 2.0
    for k in range(spec.lanes_per_arm):
        y = (k - (spec.lanes_per_arm - 1) / 2.0) * LANE_WIDTH
        prev = None
        for s in range(spec.segments):
            a = np.array([x0 + s * seg_len, y])
            b = np.array([x0 + (s + 1) * seg_len, y])
            idx = lay.add(np.linspace(a, b, 32), "lane" if s == 0 else "go_straight")
            if prev is not None:
                lay.edges.add((prev, idx))
            prev = idx
    return lay


def _junction_radius(thetas: Sequence[float], lpa: int) -> float:
    """Smallest radius (from JUNCTION_RADIUS, in 10% steps) keeping every
    entry point half a lane width away from the exit points of other arms, so
    that geometric connectivity reproduces the declared edges."""
    radius = JUNCTION_RADIUS
    while True:
        entries, exits = [], []
        for a, ta in enumerate(thetas):
            u = _unit(ta)
            nrm = np.array([-u[1], u[0]])
            for k in range(lpa):
                off = (LANE_WIDTH / 2.0 + k * LANE_WIDTH) * nrm
                entries.append((a, radius * u + off))
                exits.append((a, radius * u - off))
        gap = min(
            (float(np.linalg.norm(p - q)) for a, p in entries for b, q in exits if a != b),
            default=math.inf,
        )
        if gap >= LANE_WIDTH / 2.0:
            return radius
        radius *= 1.1


def _junction_layout(spec: ScenarioSpec, rng: np.random.Generator) -> _Layout:
    if spec.kind == "t_junction":
        base = [0.0, math.pi / 2, math.pi]
        jitter = 4.0
        allow_u = False
    elif spec.kind == "crossroad":
        base = [i * math.pi / 2 for i in range(4)]
        jitter = 4.0
        allow_u = False
    else:
        base = [i * 2 * math.pi / spec.arms for i in range(spec.arms)]
        jitter = 12.0
        allow_u = True
    thetas = [b + math.radians(rng.uniform(-jitter, jitter)) for b in base]
    lengths = [rng.uniform(12.0, 16.0) for _ in thetas]
    lay = _Layout()
    n_arms = len(thetas)
    lpa = spec.lanes_per_arm

    # movements available from each arm, as {exit arm: heading change}
    moves: list[dict[int, float]] = []
    for a, ta in enumerate(thetas):
        h0 = -_unit(ta)
        m = {}
        for b, tb in enumerate(thetas):
            if b == a and not allow_u:
                continue
            m[b] = heading_change(h0, _unit(tb))
        moves.append(m)

    radius = _junction_radius(thetas, lpa)
    incoming: dict[tuple[int, int], int] = {}
    outgoing: dict[tuple[int, int], int] = {}
    entry_pt: dict[tuple[int, int], np.ndarray] = {}
    exit_pt: dict[tuple[int, int], np.ndarray] = {}
    for a, ta in enumerate(thetas):
        u = _unit(ta)
        nrm = np.array([-u[1], u[0]])
        cats = [turn_category(d) for d in moves[a].values()]
        has_left = any(c in ("turn_left", "slight_left") for c in cats)
        has_right = any(c in ("turn_right", "slight_right") for c in cats)
        has_u = "u_turn" in cats
        if not has_left:
            in_cat = "no_left_turn"
        elif not has_right:
            in_cat = "no_right_turn"
        elif not has_u:
            in_cat = "no_u_turn"
        else:
            in_cat = "lane"
        outer = radius + lengths[a]
        for k in range(lpa):
            off = (LANE_WIDTH / 2.0 + k * LANE_WIDTH) * nrm
            e = radius * u + off
            entry_pt[a, k] = e
            incoming[a, k] = lay.add(np.linspace(outer * u + off, e, 32), in_cat)
            x = radius * u - off
            exit_pt[a, k] = x
            outgoing[a, k] = lay.add(np.linspace(x, outer * u - off, 32), "lane")

    for a, ta in enumerate(thetas):
        h0 = -_unit(ta)
        for b in sorted(moves[a]):
            h1 = _unit(thetas[b])
            cat = turn_category(moves[a][b])
            for k in range(lpa):
                p0, p3 = entry_pt[a, k], exit_pt[b, k]
                reach = max(np.linalg.norm(p3 - p0) * 0.45, 5.0)
                poly = cubic_bezier(p0, p0 + reach * h0, p3 - reach * h1, p3)
                idx = lay.add(poly, cat)
                lay.edges.add((incoming[a, k], idx))
                lay.edges.add((idx, outgoing[b, k]))
    return lay


def generate_scene(spec: ScenarioSpec) -> SceneGraph:
    """Ground-truth scene for ``spec``; deterministic in ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 0])
    lay = _straight_layout(spec, rng) if spec.kind == "straight" else _junction_layout(spec, rng)
    psi = rng.uniform(-math.pi, math.pi) if spec.rotate else 0.0
    rot = np.array([[math.cos(psi), -math.sin(psi)], [math.sin(psi), math.cos(psi)]])
    shift = rng.uniform(-2.0, 2.0, size=2)
    lanes = []
    for poly, cat in zip(lay.polylines, lay.categories):
        xy = poly @ rot.T + shift
        z = spec.ramp_slope * xy[:, :1]
        pts = resample(np.hstack([xy, z]), spec.n_points)
        lanes.append(Lane(cat, Centerline(pts)))
    graph = SceneGraph(tuple(lanes), frozenset(lay.edges))
    problems = validate(graph)
    if problems:
        raise AssertionError(f"generator produced an invalid scene: {problems}")
    return graph


def scene_elements(scene: SceneGraph, rng: np.random.Generator, n_lights: int = 1) -> list[TrafficElement]:
    """One sign per signal category present in the scene, plus ``n_lights`` lights."""
    present = sorted({ln.category for ln in scene.lanes} - {"lane"}, key=CATEGORY_INDEX.get)
    cats = present + [str(rng.choice(LIGHT_CATEGORIES)) for _ in range(n_lights)]
    elems = []
    for c in cats:
        w, h = rng.uniform(20.0, 80.0), rng.uniform(20.0, 80.0)
        x, y = rng.uniform(0.0, 1920.0 - w), rng.uniform(0.0, 1080.0 - h)
        elems.append(TrafficElement((x, y, x + w, y + h), c))
    return elems


# ---------------------------------------------------------------- detections


def feature_projection(feature_seed: int, n_points: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([feature_seed, 0xFEA7])
    return rng.standard_normal((3 * n_points, dim)) / math.sqrt(3 * n_points)


def normalize_points(points: np.ndarray, bev_extent) -> np.ndarray:
    """Map metric coordinates into [0, 1] per axis (x, y by the BEV extent, z by Z_RANGE)."""
    (x0, x1), (y0, y1) = bev_extent
    lo = np.array([x0, y0, Z_RANGE[0]])
    span = np.array([x1 - x0, y1 - y0, Z_RANGE[1] - Z_RANGE[0]])
    return (np.asarray(points) - lo) / span


def denormalize_points(points: np.ndarray, bev_extent) -> np.ndarray:
    (x0, x1), (y0, y1) = bev_extent
    lo = np.array([x0, y0, Z_RANGE[0]])
    span = np.array([x1 - x0, y1 - y0, Z_RANGE[1] - Z_RANGE[0]])
    return np.asarray(points) * span + lo


def query_features(centerlines: Sequence[Centerline], feature_seed: int, dim: int, bev_extent) -> np.ndarray:
    """Fixed random linear projection of the flattened, normalized centerline points."""
    if not centerlines:
        return np.zeros((0, dim))
    n_points = len(centerlines[0])
    flat = np.stack([normalize_points(c.points, bev_extent).reshape(-1) - 0.5 for c in centerlines])
    return 4.0 * flat @ feature_projection(feature_seed, n_points, dim)


@dataclass(frozen=True, eq=False)
class DetectionSample:
    scene: SceneGraph
    pred_centerlines: tuple[Centerline, ...]
    assignment: tuple[int, ...]  # GT lane index per query, -1 for background
    traffic_elements: tuple[TrafficElement, ...]
    feature_seed: int
    feature_dim: int
    bev_extent: tuple[tuple[float, float], tuple[float, float]]
    scene_id: str = ""
    kind: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pred_centerlines", tuple(self.pred_centerlines))
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))
        object.__setattr__(self, "traffic_elements", tuple(self.traffic_elements))
        ext = tuple((float(a), float(b)) for a, b in self.bev_extent)
        object.__setattr__(self, "bev_extent", ext)
        if len(self.assignment) != len(self.pred_centerlines):
            raise ValueError("assignment length must equal the number of queries")
        matched = sorted(a for a in self.assignment if a >= 0)
        if matched != list(range(len(self.scene.lanes))):
            raise ValueError("every ground-truth lane must be assigned to exactly one query")

    @property
    def n_queries(self) -> int:
        return len(self.pred_centerlines)

    @property
    def queries(self) -> np.ndarray:
        return query_features(self.pred_centerlines, self.feature_seed, self.feature_dim, self.bev_extent)

    def __eq__(self, other):
        return isinstance(other, DetectionSample) and encode_record(self) == encode_record(other)


def _random_distractor(spec: ScenarioSpec, rng: np.random.Generator) -> np.ndarray:
    (x0, x1), (y0, y1) = spec.bev_extent
    for _ in range(1000):
        start = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        theta = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(8.0, 20.0)
        bend = math.radians(rng.uniform(-60.0, 60.0))
        mid = start + 0.5 * length * _unit(theta)
        end = mid + 0.5 * length * _unit(theta + bend)
        t = np.linspace(0.0, 1.0, 64)[:, None]
        poly = (1 - t) ** 2 * start + 2 * (1 - t) * t * mid + t**2 * end
        if poly[:, 0].min() >= x0 and poly[:, 0].max() <= x1 and poly[:, 1].min() >= y0 and poly[:, 1].max() <= y1:
            z = spec.ramp_slope * poly[:, :1]
            return resample(np.hstack([poly, z]), spec.n_points)
    raise RuntimeError("could not place a distractor inside the BEV extent")


def perturb_detections(scene: SceneGraph, spec: ScenarioSpec) -> DetectionSample:
    """Simulated detector output for ``scene``: noisy lanes plus background distractors."""
    rng = np.random.default_rng([spec.seed, 1])
    noisy = []
    for lane in scene.lanes:
        pts = lane.centerline.points
        if spec.noise_sigma > 0:
            pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
        noisy.append(Centerline(pts))
    distractors = [Centerline(_random_distractor(spec, rng)) for _ in range(spec.distractor_count)]
    n = len(noisy) + len(distractors)
    # background slots are spread among the GT queries; GT keeps its relative order
    bg_slots = set(rng.choice(n, size=len(distractors), replace=False).tolist()) if distractors else set()
    centerlines, assignment = [], []
    gt_iter, bg_iter = iter(range(len(noisy))), iter(distractors)
    for slot in range(n):
        if slot in bg_slots:
            centerlines.append(next(bg_iter))
            assignment.append(-1)
        else:
            g = next(gt_iter)
            centerlines.append(noisy[g])
            assignment.append(g)
    elems = scene_elements(scene, np.random.default_rng([spec.seed, 2]), spec.n_lights)
    return DetectionSample(
        scene=scene,
        pred_centerlines=tuple(centerlines),
        assignment=tuple(assignment),
        traffic_elements=tuple(elems),
        feature_seed=spec.feature_seed,
        feature_dim=spec.feature_dim,
        bev_extent=spec.bev_extent,
        scene_id=f"{spec.kind}-{spec.seed}",
        kind=spec.kind,
    )


def make_sample(spec: ScenarioSpec) -> DetectionSample:
    return perturb_detections(generate_scene(spec), spec)


def scene_hash(scene: SceneGraph) -> str:
    h = hashlib.sha256()
    for lane in scene.lanes:
        h.update(lane.category.encode())
        h.update(np.ascontiguousarray(lane.centerline.points).tobytes())
    for e in sorted(scene.edges):
        h.update(repr(e).encode())
    return h.hexdigest()


# ---------------------------------------------------------------- serialization


def _pts(c: Centerline) -> list[list[float]]:
    return [[float(v) for v in row] for row in c.points]


def encode_record(sample: DetectionSample) -> str:
    rec = {
        "scene_id": sample.scene_id,
        "kind": sample.kind,
        "bev_extent": [list(r) for r in sample.bev_extent],
        "lanes": [{"category": ln.category, "points": _pts(ln.centerline)} for ln in sample.scene.lanes],
        "edges": [list(e) for e in sorted(sample.scene.edges)],
        "detections": {
            "centerlines": [_pts(c) for c in sample.pred_centerlines],
            "assignment": list(sample.assignment),
            "feature_seed": sample.feature_seed,
            "feature_dim": sample.feature_dim,
        },
        "traffic_elements": [
            {"bbox": list(te.bbox), "category": te.category} for te in sample.traffic_elements
        ],
    }
    return json.dumps(rec, separators=(",", ":"))


def _require(obj, key, line, ctx=""):
    if not isinstance(obj, dict) or key not in obj:
        raise DatasetError(line, ctx + key, "missing")
    return obj[key]


def _centerline(raw, line, fld) -> Centerline:
    try:
        return Centerline(np.array(raw, dtype=np.float64))
    except (ValueError, TypeError) as exc:
        raise DatasetError(line, fld, str(exc)) from None


def decode_record(text: str, line: int = 1) -> DetectionSample:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetError(line, "<record>", f"malformed JSON ({exc.msg})") from None
    lanes = []
    for i, raw in enumerate(_require(rec, "lanes", line)):
        cat = _require(raw, "category", line, f"lanes[{i}].")
        if cat not in CATEGORY_INDEX:
            raise DatasetError(line, f"lanes[{i}].category", f"unknown category {cat!r}")
        lanes.append(Lane(cat, _centerline(_require(raw, "points", line, f"lanes[{i}]."), line, f"lanes[{i}].points")))
    try:
        edges = frozenset((int(i), int(j)) for i, j in _require(rec, "edges", line))
    except (TypeError, ValueError):
        raise DatasetError(line, "edges", "expected a list of [i, j] pairs") from None
    scene = SceneGraph(tuple(lanes), edges)
    problems = validate(scene)
    if problems:
        raise DatasetError(line, "edges", "; ".join(problems))
    det = _require(rec, "detections", line)
    cls = [
        _centerline(c, line, f"detections.centerlines[{k}]")
        for k, c in enumerate(_require(det, "centerlines", line, "detections."))
    ]
    elems = []
    for k, raw in enumerate(_require(rec, "traffic_elements", line)):
        try:
            elems.append(TrafficElement(tuple(_require(raw, "bbox", line, f"traffic_elements[{k}].")), raw.get("category")))
        except (ValueError, TypeError) as exc:
            raise DatasetError(line, f"traffic_elements[{k}]", str(exc)) from None
    try:
        return DetectionSample(
            scene=scene,
            pred_centerlines=tuple(cls),
            assignment=tuple(_require(det, "assignment", line, "detections.")),
            traffic_elements=tuple(elems),
            feature_seed=int(_require(det, "feature_seed", line, "detections.")),
            feature_dim=int(_require(det, "feature_dim", line, "detections.")),
            bev_extent=tuple(tuple(r) for r in _require(rec, "bev_extent", line)),
            scene_id=str(rec.get("scene_id", "")),
            kind=str(rec.get("kind", "")),
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(line, "detections.assignment", str(exc)) from None


def write_dataset(samples: Iterable[DetectionSample], path, config: dict | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, "config": config or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for s in samples:
            fh.write(encode_record(s) + "\n")


def read_header(path) -> dict:
    with Path(path).open(encoding="utf-8") as fh:
        first = fh.readline()
    return _parse_header(first)


def _parse_header(text: str) -> dict:
    try:
        header = json.loads(text)
    except json.JSONDecodeError:
        raise DatasetError(1, "format_version", "header is not valid JSON") from None
    version = header.get("format_version") if isinstance(header, dict) else None
    if version is None:
        raise DatasetError(1, "format_version", "missing")
    if version != FORMAT_VERSION:
        raise DatasetVersionError(1, "format_version", f"unsupported version {version} (expected {FORMAT_VERSION})")
    return header


def read_dataset(path) -> list[DetectionSample]:
    samples = []
    with Path(path).open(encoding="utf-8") as fh:
        _parse_header(fh.readline())
        for lineno, text in enumerate(fh, start=2):
            if text.strip():
                samples.append(decode_record(text, lineno))
    return samples


def scenario_specs(count: int, seed: int, base: ScenarioSpec, kinds=("straight", "t_junction", "crossroad")) -> list[ScenarioSpec]:
    """``count`` specs cycling through ``kinds`` with per-record seeds drawn from ``seed``."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(count, dtype=np.uint64)
    rng = np.random.default_rng(ss.spawn(1)[0])
    specs = []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        fields = asdict(base) | {"kind": kind, "seed": int(seeds[i])}
        if kind == "straight":
            fields["segments"] = int(rng.integers(2, 4))
        specs.append(ScenarioSpec(**fields))
    return specs
