"""Dynamic attention zones and the per-timestep interaction graph.

Every agent gets a circle whose radius grows with its current speed and body
length. Two agents interact when their circles touch or overlap; the graph is
rebuilt from scratch at each timestep.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import InvalidState, NotFound
from .scene import DEFAULT_DIMENSIONS, Scenario, speed_at

log = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.5


@dataclass(frozen=True)
class AttentionZone:
    center: tuple[float, float]
    radius: float


def attention_radius(velocity: float, horizon_seconds: float, lam: float, length: float) -> float:
    """velocity * horizon + lam * length."""
    if velocity < 0:
        raise InvalidState(f"negative velocity {velocity}")
    if length <= 0:
        raise InvalidState(f"non-positive length {length}")
    if horizon_seconds <= 0:
        raise InvalidState(f"non-positive horizon {horizon_seconds}")
    if lam < 0:
        raise InvalidState(f"negative lambda {lam}")
    return velocity * horizon_seconds + lam * length


def zones_intersect(a: AttentionZone, b: AttentionZone) -> bool:
    # closed condition: tangent circles interact
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    return float(np.hypot(dx, dy)) <= a.radius + b.radius


@dataclass(frozen=True)
class InteractionGraph:
    vertices: tuple[str, ...]
    edges: frozenset[tuple[str, str]]  # each pair stored sorted
    zones: dict[str, AttentionZone] = field(default_factory=dict, compare=False)
    skipped: tuple[str, ...] = field(default=(), compare=False)

    def neighbors(self, vid: str) -> list[str]:
        """N_i: the vertex itself plus every adjacent vertex, in vertex order."""
        if vid not in self.vertices:
            raise NotFound(vid)
        adj = {j for e in self.edges if vid in e for j in e}
        adj.add(vid)
        return [v for v in self.vertices if v in adj]

    def adjacency(self) -> dict[str, list[str]]:
        return {v: self.neighbors(v) for v in self.vertices}

    def adjacency_matrix(self, order: Iterable[str] | None = None) -> np.ndarray:
        """Boolean N x N mask with self-loops, rows/cols in ``order``."""
        order = list(self.vertices if order is None else order)
        index = {v: i for i, v in enumerate(order)}
        mask = np.eye(len(order), dtype=bool)
        for a, b in self.edges:
            if a in index and b in index:
                mask[index[a], index[b]] = mask[index[b], index[a]] = True
        return mask

    def dump(self) -> str:
        """Edge list, one ``id_i id_j`` per line, lexicographic."""
        return "".join(f"{a} {b}\n" for a, b in sorted(self.edges))


def _edge(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def graph_from_zones(zones: dict[str, AttentionZone]) -> InteractionGraph:
    ids = list(zones)
    n = len(ids)
    edges = set()
    if n > 1:
        centers = np.array([zones[i].center for i in ids], dtype=np.float64)
        radii = np.array([zones[i].radius for i in ids], dtype=np.float64)
        diff = centers[:, None, :] - centers[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        hit = dist <= radii[:, None] + radii[None, :]
        for i, j in zip(*np.nonzero(np.triu(hit, k=1))):
            edges.add(_edge(ids[i], ids[j]))
    return InteractionGraph(tuple(ids), frozenset(edges), dict(zones))


def build_graph(scenario: Scenario, t: int, lam: float = DEFAULT_LAMBDA, agents=None) -> InteractionGraph:
    """Interaction graph at timestep ``t``.

    Vertices are the agents observed at ``t`` (restricted to ``agents`` when
    given); agents without a position at ``t`` are skipped and listed in
    ``graph.skipped``.
    """
    horizon = scenario.horizon_seconds
    zones: dict[str, AttentionZone] = {}
    skipped = []
    for track in scenario.agents if agents is None else agents:
        pos = track.position_at(t)
        if pos is None:
            skipped.append(track.agent_id)
            continue
        v = speed_at(track, t, scenario.frame_period)
        state = track.state_at(t)
        length = state.length if state is not None else DEFAULT_DIMENSIONS[track.agent_class][1]
        zones[track.agent_id] = AttentionZone((float(pos[0]), float(pos[1])), attention_radius(v, horizon, lam, length))
    if skipped:
        log.warning("build_graph t=%d: %d agent(s) without position skipped", t, len(skipped))
    g = graph_from_zones(zones)
    return InteractionGraph(g.vertices, g.edges, g.zones, tuple(skipped))


def ego_subgraph(g: InteractionGraph, target: str, hops: int = 1) -> InteractionGraph:
    """Induced subgraph on vertices within ``hops`` edges of ``target``."""
    if target not in g.vertices:
        raise NotFound(target)
    if hops < 1:
        raise ValueError("hops must be >= 1")
    adj = g.adjacency()
    depth = {target: 0}
    queue = deque([target])
    while queue:
        v = queue.popleft()
        if depth[v] == hops:
            continue
        for u in adj[v]:
            if u not in depth:
                depth[u] = depth[v] + 1
                queue.append(u)
    keep = [v for v in g.vertices if v in depth]
    edges = frozenset(e for e in g.edges if e[0] in depth and e[1] in depth)
    return InteractionGraph(tuple(keep), edges, {v: g.zones[v] for v in keep if v in g.zones})


__all__ = [
    "AttentionZone",
    "InteractionGraph",
    "attention_radius",
    "zones_intersect",
    "build_graph",
    "ego_subgraph",
    "graph_from_zones",
]
