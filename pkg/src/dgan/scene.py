"""Core domain types: agents, tracks, traffic states, semantic maps, agent frames.

World units are meters for vehicle/pedestrian datasets and pixels for
drone-video data; a scenario carries its unit tag and never mixes them.
Timesteps inside a scenario are integers, with the observed window ending at
``t_ob`` and the future running from ``t_ob + 1`` to ``t_f``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .errors import InsufficientHistory, InvalidState


class AgentClass(enum.Enum):
    VEHICLE = "Vehicle"
    CYCLIST = "Cyclist"
    PEDESTRIAN = "Pedestrian"

    @property
    def index(self) -> int:
        return _CLASS_ORDER.index(self)

    @classmethod
    def parse(cls, name: str) -> "AgentClass":
        """Map a class label (canonical or a dataset alias) to its member."""
        key = name.strip().lower()
        for member in cls:
            if member.value.lower() == key or member.name.lower() == key:
                return member
        try:
            return _ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown agent class {name!r}") from None


_CLASS_ORDER = (AgentClass.VEHICLE, AgentClass.CYCLIST, AgentClass.PEDESTRIAN)
ALL_CLASSES = _CLASS_ORDER

_ALIASES = {
    "car": AgentClass.VEHICLE,
    "bus": AgentClass.VEHICLE,
    "truck": AgentClass.VEHICLE,
    "cart": AgentClass.VEHICLE,
    "van": AgentClass.VEHICLE,
    "motorcycle": AgentClass.CYCLIST,
    "bicycle": AgentClass.CYCLIST,
    "biker": AgentClass.CYCLIST,
    "skater": AgentClass.CYCLIST,
    "skateboarder": AgentClass.CYCLIST,
    "person": AgentClass.PEDESTRIAN,
    "ped": AgentClass.PEDESTRIAN,
}

# Body size used when a dataset carries no state (width, length).
DEFAULT_DIMENSIONS = {
    AgentClass.VEHICLE: (1.8, 4.5),
    AgentClass.CYCLIST: (0.6, 1.8),
    AgentClass.PEDESTRIAN: (0.5, 0.5),
}


def normalize_heading(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped < 0.0:
        wrapped += 2.0 * math.pi
    out = wrapped - math.pi
    # fmod rounding can land exactly on +pi
    if out >= math.pi:
        out -= 2.0 * math.pi
    return out


@dataclass(frozen=True)
class TrafficState:
    velocity: float
    acceleration: float
    heading: float
    width: float
    length: float
    agent_class: AgentClass

    def violations(self) -> list[str]:
        out = []
        values = (self.velocity, self.acceleration, self.heading, self.width, self.length)
        if not all(math.isfinite(v) for v in values):
            out.append("non-finite state value")
        if self.velocity < 0:
            out.append("negative velocity")
        if self.width <= 0 or self.length <= 0:
            out.append("non-positive body dimension")
        if not (-math.pi <= self.heading < math.pi):
            out.append("heading not normalized")
        return out


def _frozen_array(values, dtype, shape_tail=()) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Track:
    """One agent's positions over time, optionally with per-timestep states."""

    agent_id: str
    timesteps: np.ndarray
    xy: np.ndarray
    agent_class: AgentClass
    states: Optional[tuple[TrafficState, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "timesteps", _frozen_array(self.timesteps, np.int64))
        object.__setattr__(self, "xy", _frozen_array(self.xy, np.float64, (2,)))
        if self.xy.shape != (len(self.timesteps), 2):
            raise ValueError(f"track {self.agent_id}: xy shape {self.xy.shape} does not match timesteps")
        if self.states is not None:
            states = tuple(self.states)
            if len(states) != len(self.timesteps):
                raise ValueError(f"track {self.agent_id}: one state per timestep required")
            object.__setattr__(self, "states", states)

    @classmethod
    def from_points(cls, agent_id, points: Sequence[tuple[int, float, float]], agent_class, states=None):
        ts = [int(p[0]) for p in points]
        xy = [(float(p[1]), float(p[2])) for p in points]
        return cls(str(agent_id), ts, xy, agent_class, states)

    def __len__(self) -> int:
        return len(self.timesteps)

    def index_of(self, t: int) -> Optional[int]:
        i = int(np.searchsorted(self.timesteps, t))
        if i < len(self.timesteps) and self.timesteps[i] == t:
            return i
        return None

    def position_at(self, t: int) -> Optional[np.ndarray]:
        i = self.index_of(t)
        return None if i is None else self.xy[i]

    def state_at(self, t: int) -> Optional[TrafficState]:
        if self.states is None:
            return None
        i = self.index_of(t)
        return None if i is None else self.states[i]

    def upto(self, t: int) -> "Track":
        n = int(np.searchsorted(self.timesteps, t, side="right"))
        states = None if self.states is None else self.states[:n]
        return Track(self.agent_id, self.timesteps[:n], self.xy[:n], self.agent_class, states)

    def between(self, t0: int, t1: int) -> "Track":
        """Points with ``t0 <= t <= t1``."""
        lo = int(np.searchsorted(self.timesteps, t0, side="left"))
        hi = int(np.searchsorted(self.timesteps, t1, side="right"))
        states = None if self.states is None else self.states[lo:hi]
        return Track(self.agent_id, self.timesteps[lo:hi], self.xy[lo:hi], self.agent_class, states)


class MapKind(enum.Enum):
    UNMOVABLE_OBSTACLE = "UnmovableObstacle"
    ROAD_BOUNDARY = "RoadBoundary"
    PEDESTRIAN_CROSSING = "PedestrianCrossing"
    BICYCLE_LANE = "BicycleLane"
    LANE_CENTERLINE = "LaneCenterline"
    MOVABLE_OBSTACLE_BOX = "MovableObstacleBox"
    LANE_LINE_DOTTED = "LaneLineDotted"
    EDGE_LINE_SOLID = "EdgeLineSolid"

    @property
    def is_polygon(self) -> bool:
        return self in POLYGON_KINDS


POLYGON_KINDS = frozenset(
    {
        MapKind.UNMOVABLE_OBSTACLE,
        MapKind.PEDESTRIAN_CROSSING,
        MapKind.BICYCLE_LANE,
        MapKind.MOVABLE_OBSTACLE_BOX,
    }
)


@dataclass(frozen=True, eq=False)
class MapElement:
    kind: MapKind
    geometry: np.ndarray  # (n, 2) polygon ring (implicitly closed) or polyline

    def __post_init__(self):
        object.__setattr__(self, "geometry", _frozen_array(self.geometry, np.float64, (2,)))


@dataclass(frozen=True, eq=False)
class SemanticMap:
    elements: tuple[MapElement, ...] = ()
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # xmin, ymin, xmax, ymax

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    @classmethod
    def empty(cls) -> "SemanticMap":
        return cls((), (0.0, 0.0, 0.0, 0.0))


@dataclass(frozen=True, eq=False)
class Scenario:
    agents: tuple[Track, ...]
    map: SemanticMap
    t_ob: int
    t_f: int
    frame_period: float
    units: str = "m"
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))

    @property
    def future_steps(self) -> int:
        return self.t_f - self.t_ob

    @property
    def horizon_seconds(self) -> float:
        return self.future_steps * self.frame_period

    def agent(self, agent_id: str) -> Track:
        for track in self.agents:
            if track.agent_id == agent_id:
                return track
        raise KeyError(agent_id)

    def model_agents(self) -> list[Track]:
        """Agents the network sees: >= 2 observed points and a position at t_ob."""
        out = []
        for track in self.agents:
            obs = track.upto(self.t_ob)
            if len(obs) >= 2 and obs.timesteps[-1] == self.t_ob:
                out.append(track)
        return out

    def target_agents(self, predicate: Optional[Callable[[Track, "Scenario"], bool]] = None) -> list[Track]:
        """Model agents that receive loss and metrics."""
        predicate = predicate or full_window_target
        return [t for t in self.model_agents() if predicate(t, self)]


def full_window_target(track: Track, scenario: Scenario) -> bool:
    """Default target predicate: present over the whole observed window and the whole future."""
    needed = np.arange(1, scenario.t_f + 1)
    present = np.isin(needed, track.timesteps)
    return bool(present.all())


@dataclass(frozen=True)
class AgentFrame:
    origin: tuple[float, float]
    rotation: float

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "rotation", float(self.rotation))


def to_agent_frame(frame: AgentFrame, p) -> np.ndarray:
    """Translate by -origin, then rotate by -rotation. Accepts (2,) or (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    c, s = math.cos(frame.rotation), math.sin(frame.rotation)
    dx = p[..., 0] - frame.origin[0]
    dy = p[..., 1] - frame.origin[1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def from_agent_frame(frame: AgentFrame, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    c, s = math.cos(frame.rotation), math.sin(frame.rotation)
    x = c * p[..., 0] - s * p[..., 1] + frame.origin[0]
    y = s * p[..., 0] + c * p[..., 1] + frame.origin[1]
    return np.stack([x, y], axis=-1)


def heading_from_history(track: Track, t: int) -> float:
    """Direction of the latest nonzero displacement at or before ``t``; 0 if stationary."""
    obs = track.upto(t)
    if len(obs) < 2:
        raise InsufficientHistory(f"agent {track.agent_id} has {len(obs)} point(s) at or before t={t}")
    d = np.diff(obs.xy, axis=0)
    for dx, dy in d[::-1]:
        if dx != 0.0 or dy != 0.0:
            return normalize_heading(math.atan2(dy, dx))
    return 0.0


def agent_frame_at(track: Track, t: int) -> AgentFrame:
    """Agent-centric frame at ``t``: state heading if recorded, else displacement heading."""
    pos = track.position_at(t)
    if pos is None:
        raise InsufficientHistory(f"agent {track.agent_id} not observed at t={t}")
    state = track.state_at(t)
    rotation = state.heading if state is not None else heading_from_history(track, t)
    return AgentFrame((pos[0], pos[1]), rotation)


def speed_at(track: Track, t: int, frame_period: float) -> float:
    """Observed speed: state velocity if present, else last displacement over one frame period."""
    state = track.state_at(t)
    if state is not None:
        return state.velocity
    i = track.index_of(t)
    if i is None or i == 0:
        return 0.0
    dt = (track.timesteps[i] - track.timesteps[i - 1]) * frame_period
    return float(np.linalg.norm(track.xy[i] - track.xy[i - 1]) / dt)


def derived_state(track: Track, t: int, frame_period: float) -> TrafficState:
    """Recorded state at ``t``, or one reconstructed from positions and class defaults."""
    state = track.state_at(t)
    if state is not None:
        return state
    v = speed_at(track, t, frame_period)
    i = track.index_of(t)
    accel = 0.0
    if i is not None and i >= 2:
        v_prev = speed_at(track, int(track.timesteps[i - 1]), frame_period)
        accel = (v - v_prev) / ((track.timesteps[i] - track.timesteps[i - 1]) * frame_period)
    width, length = DEFAULT_DIMENSIONS[track.agent_class]
    return TrafficState(v, accel, heading_from_history(track, t), width, length, track.agent_class)


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    detail: str = ""


def validate_scenario(s: Scenario) -> list[Violation]:
    """All invariant violations in ``s``; empty iff well-formed."""
    out: list[Violation] = []
    if not s.t_f > s.t_ob:
        out.append(Violation("HorizonOrder", "scenario", f"t_f={s.t_f} <= t_ob={s.t_ob}"))
    if not s.frame_period > 0:
        out.append(Violation("InvalidFramePeriod", "scenario", str(s.frame_period)))
    for track in s.agents:
        ts = track.timesteps
        if len(ts) > 1 and not np.all(np.diff(ts) > 0):
            out.append(Violation("NonIncreasingTimesteps", track.agent_id))
        for t, p in zip(ts, track.xy):
            if not np.all(np.isfinite(p)):
                out.append(Violation("NonFinitePoint", track.agent_id, f"t={int(t)}"))
        if np.count_nonzero(ts <= s.t_ob) < 2:
            out.append(Violation("InsufficientHistory", track.agent_id))
        if track.states is not None:
            for t, st in zip(ts, track.states):
                for problem in st.violations():
                    out.append(Violation("InvalidState", track.agent_id, f"t={int(t)}: {problem}"))
    xmin, ymin, xmax, ymax = s.map.bounds
    for n, el in enumerate(s.map.elements):
        name = f"map.elements[{n}]"
        minimum = 3 if el.kind.is_polygon else 2
        if len(el.geometry) < minimum:
            out.append(Violation("GeometryTooShort", name, f"{el.kind.value} needs >= {minimum} vertices"))
        if not np.all(np.isfinite(el.geometry)):
            out.append(Violation("NonFinitePoint", name))
        elif len(el.geometry) and (
            el.geometry[:, 0].min() < xmin
            or el.geometry[:, 0].max() > xmax
            or el.geometry[:, 1].min() < ymin
            or el.geometry[:, 1].max() > ymax
        ):
            out.append(Violation("OutOfBounds", name))
    return out


def check_state(velocity: float, length: float) -> None:
    if velocity < 0:
        raise InvalidState(f"negative velocity {velocity}")
    if length <= 0:
        raise InvalidState(f"non-positive length {length}")
