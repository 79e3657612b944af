"""Traffic topology scene graph: lanes, categories, connectivity, proximity."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Tensor

DEFAULT_POINTS = 11


class LaneCategory(str, Enum):
    LANE = "lane"
    GO_STRAIGHT = "go_straight"
    TURN_LEFT = "turn_left"
    TURN_RIGHT = "turn_right"
    NO_LEFT_TURN = "no_left_turn"
    NO_RIGHT_TURN = "no_right_turn"
    U_TURN = "u_turn"
    NO_U_TURN = "no_u_turn"
    SLIGHT_LEFT = "slight_left"
    SLIGHT_RIGHT = "slight_right"


LANE_CATEGORIES: tuple[str, ...] = tuple(c.value for c in LaneCategory)
NUM_CLASSES = len(LANE_CATEGORIES)
CATEGORY_INDEX = {c: i for i, c in enumerate(LANE_CATEGORIES)}
LIGHT_CATEGORIES: tuple[str, ...] = ("red", "green", "yellow")
ELEMENT_CATEGORIES: tuple[str, ...] = LANE_CATEGORIES + LIGHT_CATEGORIES


@dataclass(frozen=True)
class Centerline:
    """Ordered 3-D polyline; row 0 is the start, the last row the end."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise ValueError(f"centerline needs an (l, 3) array with l >= 2, got {pts.shape}")
        if np.all(pts == pts[0]):
            raise ValueError("centerline points are all identical")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, Centerline) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


@dataclass(frozen=True)
class Lane:
    category: str
    centerline: Centerline

    def __post_init__(self):
        object.__setattr__(self, "category", getattr(self.category, "value", self.category))
        if self.category not in CATEGORY_INDEX:
            raise ValueError(f"unknown lane category {self.category!r}")


@dataclass(frozen=True)
class TrafficElement:
    bbox: tuple[float, float, float, float]
    category: str

    def __post_init__(self):
        if self.category not in ELEMENT_CATEGORIES:
            raise ValueError(f"unknown traffic element category {self.category!r}")
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    @property
    def is_light(self) -> bool:
        return self.category in LIGHT_CATEGORIES


@dataclass(frozen=True)
class SceneGraph:
    lanes: tuple[Lane, ...]
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "edges", frozenset((int(i), int(j)) for i, j in self.edges))

    def __len__(self) -> int:
        return len(self.lanes)

    def adjacency(self) -> np.ndarray:
        n = len(self.lanes)
        adj = np.zeros((n, n), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = True
        return adj

    def successors(self, i: int) -> list[int]:
        return sorted(j for a, j in self.edges if a == i)


@dataclass(frozen=True)
class SpmConfig:
    epsilon: float = 1e-6
    distance: str = "l1"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("SpmConfig.epsilon must be positive")
        if self.distance not in ("l1", "l2"):
            raise ValueError(f"unknown distance {self.distance!r}")


def spm(centerlines, cfg: SpmConfig = SpmConfig()) -> Tensor:
    """Spatial proximity matrix between lane ends and lane starts.

    Entry ``(i, j)`` is ``1 / (d(end_i, start_j) + eps)`` divided by the mean
    of all ``N * N`` such entries, diagonal included.
    """
    ends = np.array([c.end if isinstance(c, Centerline) else np.asarray(c)[-1] for c in centerlines])
    starts = np.array([c.start if isinstance(c, Centerline) else np.asarray(c)[0] for c in centerlines])
    if len(ends) == 0:
        raise ValueError("spm needs at least one centerline")
    diff = ends[:, None, :] - starts[None, :, :]
    if cfg.distance == "l1":
        dist = np.abs(diff).sum(axis=-1)
    else:
        dist = np.sqrt((diff * diff).sum(axis=-1))
    inv = 1.0 / (dist + cfg.epsilon)
    return Tensor(inv / inv.mean())


def gt_connectivity(lanes, tau: float = 0.5) -> frozenset[tuple[int, int]]:
    if tau <= 0:
        raise ValueError("tau must be positive")
    ends = np.array([ln.centerline.end for ln in lanes]).reshape(-1, 3)
    starts = np.array([ln.centerline.start for ln in lanes]).reshape(-1, 3)
    dist = np.linalg.norm(ends[:, None, :] - starts[None, :, :], axis=-1)
    hits = np.argwhere(dist <= tau)
    return frozenset((int(i), int(j)) for i, j in hits if i != j)


def validate(graph: SceneGraph) -> list[str]:
    """All structural violations of ``graph``; an empty list means well formed."""
    problems: list[str] = []
    n = len(graph.lanes)
    for idx, lane in enumerate(graph.lanes):
        if lane.category not in CATEGORY_INDEX:
            problems.append(f"unknown category at {idx}: {lane.category!r}")
        pts = lane.centerline.points
        if not np.all(np.isfinite(pts)):
            problems.append(f"non-finite centerline at {idx}")
    for i, j in sorted(graph.edges):
        if not (0 <= i < n and 0 <= j < n):
            problems.append(f"edge ({i}, {j}) out of range for {n} lanes")
        elif i == j:
            problems.append(f"self-loop at {i}")
    return problems


def lane_topology(lane_categories, element_categories) -> np.ndarray:
    """Lane-to-element association: 1 where categories agree, lights excluded."""
    lanes = np.asarray(list(lane_categories), dtype=object)
    elems = np.asarray(list(element_categories), dtype=object)
    out = np.zeros((len(lanes), len(elems)), dtype=bool)
    for j, ec in enumerate(elems):
        if ec in LIGHT_CATEGORIES:
            continue
        out[:, j] = lanes == ec
    return out
