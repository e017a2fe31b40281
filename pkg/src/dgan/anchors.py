"""Per-class anchor trajectories and ground-truth anchor assignment.

Anchors live in the agent-centric frame at the last observed step. Distances
between trajectories are the sum over timesteps of squared point distances,
so the centroid of a cluster is simply the per-timestep mean.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InsufficientData, ParseError, ShapeError
from .scene import ALL_CLASSES, AgentClass, AgentFrame, Track, to_agent_frame

MAX_ITERATIONS = 100
DEFAULT_RESTARTS = 10
# below this many k-subsets every subset of distinct futures seeds one run
EXHAUSTIVE_SEEDS = 512
DEFAULT_K_PER_CLASS = 20


@dataclass(frozen=True, eq=False)
class AnchorSet:
    anchors: dict[AgentClass, np.ndarray]  # class -> (K_c, T, 2)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ordered = {}
        for cls in ALL_CLASSES:
            if cls in self.anchors:
                arr = np.array(self.anchors[cls], dtype=np.float64)
                if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[0] < 1:
                    raise ShapeError(f"anchors for {cls.value}: expected (K, T, 2), got {arr.shape}")
                arr.setflags(write=False)
                ordered[cls] = arr
        lengths = {a.shape[1] for a in ordered.values()}
        if len(lengths) > 1:
            raise ShapeError(f"anchor horizons differ across classes: {sorted(lengths)}")
        object.__setattr__(self, "anchors", ordered)

    @property
    def classes(self) -> list[AgentClass]:
        return list(self.anchors)

    @property
    def horizon(self) -> int:
        return next(iter(self.anchors.values())).shape[1]

    def k(self, cls: AgentClass) -> int:
        return self.anchors[cls].shape[0]

    @property
    def total(self) -> int:
        return sum(a.shape[0] for a in self.anchors.values())

    def offset(self, cls: AgentClass) -> int:
        """Start of ``cls``'s block in the flat (class, anchor) ordering."""
        start = 0
        for c, a in self.anchors.items():
            if c is cls:
                return start
            start += a.shape[0]
        raise KeyError(cls)

    def stacked(self) -> np.ndarray:
        """All anchors in flat order, (sum K_c, T, 2)."""
        return np.concatenate(list(self.anchors.values()), axis=0)

    def to_json(self) -> str:
        doc = {
            "anchors": {c.value: np.asarray(a).tolist() for c, a in self.anchors.items()},
            "metadata": self.metadata,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "AnchorSet":
        try:
            doc = json.loads(text)
            anchors = {AgentClass.parse(k): np.asarray(v, dtype=np.float64) for k, v in doc["anchors"].items()}
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(f"bad anchor file: {exc}") from None
        return cls(anchors, dict(doc.get("metadata", {})))

    @classmethod
    def load(cls, path) -> "AnchorSet":
        return cls.from_json(Path(path).read_text())


def normalize_future(track: Track, frame: AgentFrame, t_ob: int, steps: int) -> np.ndarray:
    """Future points ``t_ob+1 .. t_ob+steps`` of ``track`` in ``frame``."""
    fut = track.between(t_ob + 1, t_ob + steps)
    expected = np.arange(t_ob + 1, t_ob + steps + 1)
    if len(fut) != steps or not np.array_equal(fut.timesteps, expected):
        raise ShapeError(f"agent {track.agent_id}: future has {len(fut)} of {steps} steps")
    return to_agent_frame(frame, fut.xy)


def traj_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum())


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise InsufficientData(f"only {len(centers)} distinct futures for k={k}")
        idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_objective(x: np.ndarray, centers: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centers[labels]) ** 2).sum())


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = MAX_ITERATIONS):
    """Lloyd iterations from ``centers``; returns (centers, labels, objective trace)."""
    labels = None
    trace = []
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dist, axis=1)  # ties -> lowest cluster index
        trace.append(kmeans_objective(x, centers, new_labels))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    else:
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dist, axis=1)
        trace.append(kmeans_objective(x, centers, labels))
    return centers, labels, trace


def hartigan(x: np.ndarray, centers: np.ndarray, labels: np.ndarray):
    """Single-point moves that strictly lower the objective, until none is left.

    Escapes Lloyd fixed points where moving one trajectory to another cluster
    pays off once both centroids shift. A stable result is also Lloyd-stable.
    """
    labels = labels.copy()
    k = len(centers)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    centers = np.array([x[labels == j].mean(axis=0) if counts[j] else centers[j] for j in range(k)])
    moved = True
    while moved:
        moved = False
        for i in range(len(x)):
            a = labels[i]
            if counts[a] <= 1:
                continue
            d = ((x[i] - centers) ** 2).sum(axis=1)
            cost_in = counts / (counts + 1) * d
            cost_out = counts[a] / (counts[a] - 1) * d[a]
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < cost_out * (1 - 1e-12):
                centers[a] = (centers[a] * counts[a] - x[i]) / (counts[a] - 1)
                centers[b] = (centers[b] * counts[b] + x[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                labels[i] = b
                moved = True
    return centers, labels


def _seedings(x: np.ndarray, k: int, rng: np.random.Generator, restarts: int):
    distinct = np.unique(x, axis=0)
    if len(distinct) < k:
        raise InsufficientData(f"only {len(distinct)} distinct futures for k={k}")
    if math.comb(len(distinct), k) <= EXHAUSTIVE_SEEDS:
        for subset in itertools.combinations(range(len(distinct)), k):
            yield distinct[list(subset)].copy()
        return
    for _ in range(restarts):
        yield _kmeans_pp(x, k, rng)


def cluster(x: np.ndarray, k: int, rng: np.random.Generator, restarts: int = DEFAULT_RESTARTS):
    """Best of several Lloyd + single-move refinement runs; returns (centers, labels, objective)."""
    best = None
    for init in _seedings(x, k, rng, restarts):
        centers, labels, _ = lloyd(x, init)
        centers, labels = hartigan(x, centers, labels)
        obj = kmeans_objective(x, centers, labels)
        if best is None or obj < best[2]:
            best = (centers, labels, obj)
    return best


def _class_futures(futures, cls) -> np.ndarray:
    arr = np.asarray(futures, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ShapeError(f"{cls}: futures must be (n, T, 2), got {arr.shape}")
    return arr


def kmeans_anchors(
    futures: Mapping[AgentClass, Sequence],
    k_per_class: int | Mapping[AgentClass, int],
    seed: int = 0,
    restarts: int = DEFAULT_RESTARTS,
) -> AnchorSet:
    """Per-class k-means under the summed squared point distance.

    Small populations are seeded from every k-subset of distinct futures;
    larger ones from ``restarts`` k-means++ draws. Each start runs Lloyd
    iterations followed by single-point refinement, and the lowest
    objective wins (first one on ties).
    """
    anchors = {}
    populations = {}
    for cls, fut in futures.items():
        k = k_per_class if isinstance(k_per_class, int) else k_per_class[cls]
        arr = _class_futures(fut, cls)
        if len(arr) < k:
            raise InsufficientData(f"{cls.value}: {len(arr)} futures for K={k}")
        n, t, _ = arr.shape
        x = arr.reshape(n, t * 2)
        rng = np.random.default_rng([seed, cls.index])
        centers, labels, _ = cluster(x, k, rng, restarts)
        anchors[cls] = centers.reshape(k, t, 2)
        populations[cls.value] = np.bincount(labels, minlength=k).tolist()
    return AnchorSet(anchors, {"method": "kmeans", "seed": seed, "restarts": restarts, "populations": populations})


def uniform_sample_anchors(
    futures: Mapping[AgentClass, Sequence], k_per_class: int | Mapping[AgentClass, int], seed: int = 0
) -> AnchorSet:
    """K_c distinct futures per class drawn without replacement, kept in data order."""
    anchors = {}
    for cls, fut in futures.items():
        k = k_per_class if isinstance(k_per_class, int) else k_per_class[cls]
        arr = _class_futures(fut, cls)
        n, t, _ = arr.shape
        _, first = np.unique(arr.reshape(n, t * 2), axis=0, return_index=True)
        distinct = arr[np.sort(first)]
        if len(distinct) < k:
            raise InsufficientData(f"{cls.value}: {len(distinct)} distinct futures for K={k}")
        rng = np.random.default_rng([seed, cls.index])
        pick = np.sort(rng.choice(len(distinct), size=k, replace=False))
        anchors[cls] = distinct[pick]
    return AnchorSet(anchors, {"method": "uniform", "seed": seed})


def nearest_anchor(anchors: AnchorSet, cls: AgentClass, y) -> int:
    """Index of the closest anchor of ``cls``; ties go to the lowest index."""
    if cls not in anchors.anchors:
        raise InsufficientData(f"no anchors for class {cls.value}")
    a = anchors.anchors[cls]
    y = np.asarray(y, dtype=np.float64)
    if y.shape != a.shape[1:]:
        raise ShapeError(f"trajectory shape {y.shape} vs anchors {a.shape[1:]}")
    d = ((a - y[None]) ** 2).sum(axis=(1, 2))
    return int(np.argmin(d))
