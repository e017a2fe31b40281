"""Dataset loading, scenario windows, synthetic scenes and the scenario JSON format.

Scenario JSON (canonical interchange format)::

    {
      "format": "dgan-scenario", "version": 1,
      "t_ob": 8, "t_f": 20, "frame_period": 0.4, "units": "m",
      "metadata": {...},
      "agents": [
        {"id": "12", "class": "Pedestrian",
         "points": [[t, x, y], ...],
         "states": [[velocity, acceleration, heading, width, length], ...]}   # optional, one per point
      ],
      "map": {"bounds": [xmin, ymin, xmax, ymax],
              "elements": [{"kind": "LaneCenterline", "geometry": [[x, y], ...]}]}
    }

Files are written with sorted keys and Python's shortest round-trip float
repr, so save -> load -> save is byte-identical. Unknown keys are ignored.
"""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DuplicateObservation, ParseError
from .scene import (
    DEFAULT_DIMENSIONS,
    AgentClass,
    MapElement,
    MapKind,
    Scenario,
    SemanticMap,
    Track,
    TrafficState,
    normalize_heading,
)

FORMAT_TAG = "dgan-scenario"
FORMAT_VERSION = 1

ETHUCY_FRAME_PERIOD = 0.4
ETHUCY_T_OB = 8
ETHUCY_T_F = 12
LOGISTIC_T_OB = 10
LOGISTIC_T_F = 15
LOGISTIC_FRAME_PERIOD = 0.2


# --------------------------------------------------------------- ETH / UCY


def load_ethucy(path, column_order: Sequence[str] = ("frame", "id", "x", "y"), frame_period: float = ETHUCY_FRAME_PERIOD):
    """Whitespace-separated rows -> Pedestrian tracks keyed by raw frame number.

    ``column_order`` names the meaning of each column; ETH-style releases
    disagree on whether x or y comes first, so it is required config rather
    than a guess. Extra columns are ignored.
    """
    cols = list(column_order)
    missing = {"frame", "id", "x", "y"} - set(cols)
    if missing:
        raise ConfigError(f"column_order lacks {sorted(missing)}")
    ci = {name: cols.index(name) for name in ("frame", "id", "x", "y")}
    rows: dict[str, dict[int, tuple[float, float]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < len(cols):
                raise ParseError(f"{path}:{lineno}: expected {len(cols)} columns, got {len(parts)}")
            try:
                frame_f = float(parts[ci["frame"]])
                x = float(parts[ci["x"]])
                y = float(parts[ci["y"]])
                raw_id = parts[ci["id"]]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed row {line.strip()!r}") from None
            if not (math.isfinite(frame_f) and math.isfinite(x) and math.isfinite(y)) or frame_f != int(frame_f):
                raise ParseError(f"{path}:{lineno}: malformed row {line.strip()!r}")
            agent = _clean_id(raw_id)
            frame = int(frame_f)
            track = rows.setdefault(agent, {})
            if frame in track:
                raise DuplicateObservation(f"{path}:{lineno}: duplicate observation of agent {agent} at frame {frame}")
            track[frame] = (x, y)
    tracks = []
    for agent in sorted(rows, key=_id_sort_key):
        frames = sorted(rows[agent])
        tracks.append(Track(agent, frames, [rows[agent][f] for f in frames], AgentClass.PEDESTRIAN))
    return tracks


def _clean_id(raw: str) -> str:
    try:
        v = float(raw)
    except ValueError:
        return raw
    return str(int(v)) if v.is_integer() else raw


def _id_sort_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def window_scenarios(
    tracks: Sequence[Track],
    t_ob: int,
    t_f_steps: int,
    stride: int = 1,
    frame_period: float = ETHUCY_FRAME_PERIOD,
    frame_step: Optional[int] = None,
    semantic_map: Optional[SemanticMap] = None,
    units: str = "m",
    source: str = "",
    require_target: bool = True,
) -> list[Scenario]:
    """Sliding windows of ``t_ob + t_f_steps`` frames re-indexed to steps 1..t_f.

    Every agent with a point in the window is kept; agents covering the whole
    window become prediction targets, the rest are context only. Windows
    without any target are dropped when ``require_target``.
    """
    if t_ob < 1 or t_f_steps < 1 or stride < 1:
        raise ConfigError("t_ob, t_f_steps and stride must be >= 1")
    all_frames = np.unique(np.concatenate([t.timesteps for t in tracks])) if tracks else np.zeros(0, int)
    if len(all_frames) == 0:
        return []
    if frame_step is None:
        diffs = np.diff(all_frames)
        frame_step = int(diffs[diffs > 0].min()) if len(diffs) else 1
    length = t_ob + t_f_steps
    smap = semantic_map or SemanticMap.empty()
    out = []
    first, last = int(all_frames[0]), int(all_frames[-1])
    starts = range(first, last - (length - 1) * frame_step + 1, stride * frame_step)
    for start in starts:
        end = start + (length - 1) * frame_step
        agents = []
        for tr in tracks:
            sel = (tr.timesteps >= start) & (tr.timesteps <= end) & ((tr.timesteps - start) % frame_step == 0)
            if not sel.any():
                continue
            steps = (tr.timesteps[sel] - start) // frame_step + 1
            states = None if tr.states is None else tuple(s for s, k in zip(tr.states, sel) if k)
            agents.append(Track(tr.agent_id, steps, tr.xy[sel], tr.agent_class, states))
        if not agents:
            continue
        sc = Scenario(
            agents,
            smap,
            t_ob,
            length,
            frame_period,
            units,
            {"source": source, "start_frame": int(start), "frame_step": int(frame_step)},
        )
        if require_target and not sc.target_agents():
            continue
        out.append(sc)
    return out


# ------------------------------------------------------------ scenario JSON


def scenario_to_dict(s: Scenario) -> dict:
    agents = []
    for tr in s.agents:
        entry = {
            "id": tr.agent_id,
            "class": tr.agent_class.value,
            "points": [[int(t), float(x), float(y)] for t, (x, y) in zip(tr.timesteps, tr.xy)],
        }
        if tr.states is not None:
            entry["states"] = [
                [float(st.velocity), float(st.acceleration), float(st.heading), float(st.width), float(st.length)]
                for st in tr.states
            ]
        agents.append(entry)
    return {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "t_ob": int(s.t_ob),
        "t_f": int(s.t_f),
        "frame_period": float(s.frame_period),
        "units": s.units,
        "metadata": s.metadata,
        "agents": agents,
        "map": {
            "bounds": [float(b) for b in s.map.bounds],
            "elements": [
                {"kind": el.kind.value, "geometry": [[float(x), float(y)] for x, y in el.geometry]}
                for el in s.map.elements
            ],
        },
    }


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), sort_keys=True, separators=(",", ":")) + "\n"


def save_scenario_json(s: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(s))


def _require(doc, key, path, kind=None):
    if not isinstance(doc, dict) or key not in doc:
        raise ParseError(f"{path}: missing required field {key!r}")
    value = doc[key]
    if kind is not None and not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ParseError(f"{path}.{key}: expected {getattr(kind, '__name__', kind)}")
    return value


def _number(v, path) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{path}: expected a number")
    return float(v)


def _pairs(seq, path) -> list[tuple[float, float]]:
    if not isinstance(seq, list):
        raise ParseError(f"{path}: expected a list of [x, y]")
    out = []
    for i, p in enumerate(seq):
        if not isinstance(p, list) or len(p) != 2:
            raise ParseError(f"{path}[{i}]: expected [x, y]")
        out.append((_number(p[0], f"{path}[{i}][0]"), _number(p[1], f"{path}[{i}][1]")))
    return out


def scenario_from_dict(doc) -> Scenario:
    root = "$"
    if not isinstance(doc, dict):
        raise ParseError("$: expected an object")
    t_ob = _require(doc, "t_ob", root, int)
    t_f = _require(doc, "t_f", root, int)
    period = _number(_require(doc, "frame_period", root), "$.frame_period")
    units = doc.get("units", "m")
    agents = []
    for n, a in enumerate(_require(doc, "agents", root, list)):
        ap = f"$.agents[{n}]"
        aid = str(_require(a, "id", ap))
        try:
            cls = AgentClass.parse(str(_require(a, "class", ap, str)))
        except ValueError as exc:
            raise ParseError(f"{ap}.class: {exc}") from None
        pts = _require(a, "points", ap, list)
        ts, xy = [], []
        for i, p in enumerate(pts):
            pp = f"{ap}.points[{i}]"
            if not isinstance(p, list) or len(p) != 3 or not isinstance(p[0], int) or isinstance(p[0], bool):
                raise ParseError(f"{pp}: expected [t, x, y] with integer t")
            ts.append(p[0])
            xy.append((_number(p[1], f"{pp}[1]"), _number(p[2], f"{pp}[2]")))
        states = None
        if "states" in a:
            raw = _require(a, "states", ap, list)
            if len(raw) != len(pts):
                raise ParseError(f"{ap}.states: expected {len(pts)} entries, got {len(raw)}")
            states = []
            for i, st in enumerate(raw):
                sp = f"{ap}.states[{i}]"
                if not isinstance(st, list) or len(st) != 5:
                    raise ParseError(f"{sp}: expected [velocity, acceleration, heading, width, length]")
                v = [_number(x, f"{sp}[{j}]") for j, x in enumerate(st)]
                states.append(TrafficState(v[0], v[1], v[2], v[3], v[4], cls))
        agents.append(Track(aid, ts, xy, cls, states))
    m = _require(doc, "map", root, dict)
    bounds = _require(m, "bounds", "$.map", list)
    if len(bounds) != 4:
        raise ParseError("$.map.bounds: expected [xmin, ymin, xmax, ymax]")
    bounds = tuple(_number(b, f"$.map.bounds[{i}]") for i, b in enumerate(bounds))
    elements = []
    for n, el in enumerate(_require(m, "elements", "$.map", list)):
        ep = f"$.map.elements[{n}]"
        try:
            kind = MapKind(_require(el, "kind", ep, str))
        except ValueError:
            raise ParseError(f"{ep}.kind: unknown map element kind {el.get('kind')!r}") from None
        elements.append(MapElement(kind, _pairs(_require(el, "geometry", ep, list), f"{ep}.geometry")))
    meta = doc.get("metadata", {})
    if not isinstance(meta, dict):
        raise ParseError("$.metadata: expected an object")
    return Scenario(agents, SemanticMap(elements, bounds), t_ob, t_f, period, units, meta)


def loads_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"$: invalid JSON ({exc})") from None
    return scenario_from_dict(doc)


def load_scenario_json(path) -> Scenario:
    return loads_scenario(Path(path).read_text())


def load_scenario_dir(path) -> list[Scenario]:
    """Every ``*.json`` scenario in ``path`` (a directory) or the single file ``path``."""
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    return [load_scenario_json(f) for f in files]


# -------------------------------------------------------- synthetic scenes

ARCHETYPES = ("constant_velocity", "constant_turn", "stop", "lane_following")

DEFAULT_SYNTH_SPEC = {
    "num_scenarios": 8,
    "t_ob": LOGISTIC_T_OB,
    "t_f_steps": LOGISTIC_T_F,
    "frame_period": LOGISTIC_FRAME_PERIOD,
    "noise_sigma": 0.0,
    "agents": [
        {"class": "Vehicle", "count": 2, "archetype": "lane_following", "speed": [4.0, 8.0]},
        {"class": "Cyclist", "count": 2, "archetype": "constant_turn", "speed": [2.5, 4.0], "turn_rate": [0.25, 0.45]},
        {"class": "Pedestrian", "count": 2, "archetype": "constant_velocity", "speed": [0.8, 1.5]},
    ],
}


def synthetic_map(rng: np.random.Generator) -> SemanticMap:
    """Fixed road layout with seeded parked boxes: a two-lane straight road,
    a lane curving off to the south, a crossing, a bicycle lane and a median."""
    el = []
    el.append(MapElement(MapKind.BICYCLE_LANE, [(-45, 5.5), (45, 5.5), (45, 7.5), (-45, 7.5)]))
    el.append(MapElement(MapKind.PEDESTRIAN_CROSSING, [(-3, -5), (3, -5), (3, 5), (-3, 5)]))
    el.append(MapElement(MapKind.UNMOVABLE_OBSTACLE, [(20, -0.4), (40, -0.4), (40, 0.4), (20, 0.4)]))
    el.append(MapElement(MapKind.LANE_CENTERLINE, [(-45, -2), (45, -2)]))
    el.append(MapElement(MapKind.LANE_CENTERLINE, [(45, 2), (-45, 2)]))
    arc = [(-10 + 20 * math.cos(a), -22 + 20 * math.sin(a)) for a in np.linspace(math.pi / 2, 0.0, 16)]
    arc.append((10.0, -48.0))
    el.append(MapElement(MapKind.LANE_CENTERLINE, arc))
    el.append(MapElement(MapKind.LANE_LINE_DOTTED, [(-45, 0), (20, 0)]))
    el.append(MapElement(MapKind.EDGE_LINE_SOLID, [(-45, -4), (45, -4)]))
    el.append(MapElement(MapKind.EDGE_LINE_SOLID, [(-45, 4), (45, 4)]))
    el.append(MapElement(MapKind.ROAD_BOUNDARY, [(-45, -5), (-10, -5)]))
    el.append(MapElement(MapKind.ROAD_BOUNDARY, [(10, -5), (45, -5)]))
    el.append(MapElement(MapKind.ROAD_BOUNDARY, [(-45, 5), (45, 5)]))
    for _ in range(2):
        x = float(rng.uniform(-40, 35))
        y = float(rng.choice([-9.0, 9.5]))
        el.append(MapElement(MapKind.MOVABLE_OBSTACLE_BOX, [(x, y), (x + 4.5, y), (x + 4.5, y + 1.8), (x, y + 1.8)]))
    return SemanticMap(el, (-50.0, -50.0, 50.0, 50.0))


def _polyline_at(poly: np.ndarray, s: np.ndarray):
    """Position and heading at arc lengths ``s`` along ``poly`` (clamped to the ends)."""
    seg = np.diff(poly, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.clip(s, 0.0, cum[-1])
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    u = (s - cum[idx]) / seg_len[idx]
    pos = poly[idx] + u[:, None] * seg[idx]
    heading = np.arctan2(seg[idx, 1], seg[idx, 0])
    return pos, heading


def motion_model(archetype: str, params: dict, tau: np.ndarray):
    """Closed-form (positions, speeds, accelerations, headings) at times ``tau`` (s)."""
    x0, y0 = params["start"]
    theta0 = params.get("heading", 0.0)
    v = params.get("speed", 0.0)
    n = len(tau)
    if archetype == "constant_velocity":
        pos = np.stack([x0 + v * tau * math.cos(theta0), y0 + v * tau * math.sin(theta0)], axis=1)
        return pos, np.full(n, v), np.zeros(n), np.full(n, theta0)
    if archetype == "constant_turn":
        w = params["turn_rate"]
        theta = theta0 + w * tau
        pos = np.stack(
            [x0 + v / w * (np.sin(theta) - math.sin(theta0)), y0 - v / w * (np.cos(theta) - math.cos(theta0))], axis=1
        )
        return pos, np.full(n, v), np.zeros(n), theta
    if archetype == "stop":
        a = params.get("decel", 1.0)
        t_stop = v / a if a > 0 else np.inf
        tt = np.minimum(tau, t_stop)
        s = v * tt - 0.5 * a * tt * tt
        pos = np.stack([x0 + s * math.cos(theta0), y0 + s * math.sin(theta0)], axis=1)
        speed = np.maximum(v - a * tau, 0.0)
        acc = np.where(tau < t_stop, -a, 0.0)
        return pos, speed, acc, np.full(n, theta0)
    if archetype == "lane_following":
        poly = np.asarray(params["lane"], dtype=np.float64)
        pos, heading = _polyline_at(poly, params["s0"] + v * tau)
        return pos, np.full(n, v), np.zeros(n), heading
    raise ConfigError(f"unknown archetype {archetype!r}")


def _range(entry, key, default):
    r = entry.get(key, default)
    if isinstance(r, (int, float)):
        r = [r, r]
    if not isinstance(r, list) or len(r) != 2 or r[0] > r[1]:
        raise ConfigError(f"{key}: expected [min, max]")
    return float(r[0]), float(r[1])


def validate_synth_spec(spec: dict) -> None:
    if not isinstance(spec, dict):
        raise ConfigError("synthetic spec must be a JSON object")
    for key in ("t_ob", "t_f_steps", "num_scenarios"):
        v = spec.get(key, DEFAULT_SYNTH_SPEC[key])
        if not isinstance(v, int) or v < 1:
            raise ConfigError(f"{key} must be a positive integer")
    if spec.get("t_ob", DEFAULT_SYNTH_SPEC["t_ob"]) < 2:
        raise ConfigError("t_ob must be >= 2")
    if not float(spec.get("frame_period", 0.2)) > 0:
        raise ConfigError("frame_period must be positive")
    if float(spec.get("noise_sigma", 0.0)) < 0:
        raise ConfigError("noise_sigma must be >= 0")
    agents = spec.get("agents")
    if not isinstance(agents, list) or not agents:
        raise ConfigError("agents must be a non-empty list")
    for i, entry in enumerate(agents):
        if not isinstance(entry, dict):
            raise ConfigError(f"agents[{i}] must be an object")
        try:
            AgentClass.parse(str(entry.get("class", "")))
        except ValueError as exc:
            raise ConfigError(f"agents[{i}].class: {exc}") from None
        if entry.get("archetype") not in ARCHETYPES:
            raise ConfigError(f"agents[{i}].archetype must be one of {ARCHETYPES}")
        if not isinstance(entry.get("count", 1), int) or entry.get("count", 1) < 0:
            raise ConfigError(f"agents[{i}].count must be a non-negative integer")
        lo, _ = _range(entry, "speed", [1.0, 1.0])
        if lo < 0:
            raise ConfigError(f"agents[{i}].speed must be >= 0")
        if entry["archetype"] == "constant_turn":
            tlo, thi = _range(entry, "turn_rate", [0.3, 0.3])
            if tlo <= 0:
                raise ConfigError(f"agents[{i}].turn_rate must be positive (the sign is drawn at random)")


def _sample_params(archetype, entry, cls, rng, smap: SemanticMap):
    v = float(rng.uniform(*_range(entry, "speed", [1.0, 1.0])))
    params = {"speed": v}
    if archetype == "lane_following":
        lanes = [el.geometry for el in smap.elements if el.kind is MapKind.LANE_CENTERLINE]
        lane = lanes[int(rng.integers(len(lanes)))]
        seg = np.diff(lane, axis=0)
        total = float(np.hypot(seg[:, 0], seg[:, 1]).sum())
        params.update(lane=lane.tolist(), s0=float(rng.uniform(0.0, total * 0.3)))
        params["start"] = tuple(lane[0])
        return params
    if cls is AgentClass.PEDESTRIAN:
        start = (float(rng.uniform(-8, 8)), float(rng.uniform(-8, 8)))
    elif cls is AgentClass.CYCLIST:
        start = (float(rng.uniform(-25, 25)), float(rng.uniform(4, 9)))
    else:
        start = (float(rng.uniform(-30, 30)), float(rng.uniform(-3, 3)))
    params["start"] = start
    params["heading"] = float(rng.uniform(-math.pi, math.pi))
    if archetype == "constant_turn":
        w = float(rng.uniform(*_range(entry, "turn_rate", [0.3, 0.3])))
        params["turn_rate"] = w if rng.random() < 0.5 else -w
    if archetype == "stop":
        params["decel"] = float(rng.uniform(*_range(entry, "decel", [1.0, 2.0])))
    return params


def synth_scenarios(spec: Optional[dict] = None, seed: int = 0) -> list[Scenario]:
    """Deterministic synthetic scenes; ground truth follows each archetype's closed form (plus noise)."""
    spec = dict(DEFAULT_SYNTH_SPEC if spec is None else spec)
    validate_synth_spec(spec)
    t_ob = int(spec.get("t_ob", LOGISTIC_T_OB))
    t_fs = int(spec.get("t_f_steps", LOGISTIC_T_F))
    dt = float(spec.get("frame_period", LOGISTIC_FRAME_PERIOD))
    sigma = float(spec.get("noise_sigma", 0.0))
    n_scen = int(spec.get("num_scenarios", 1))
    total = t_ob + t_fs
    steps = np.arange(1, total + 1)
    tau = (steps - 1) * dt
    out = []
    for k in range(n_scen):
        rng = np.random.default_rng([seed, k])
        smap = synthetic_map(rng)
        tracks = []
        counters: dict[AgentClass, int] = {}
        for entry in spec["agents"]:
            cls = AgentClass.parse(entry["class"])
            archetype = entry["archetype"]
            for _ in range(int(entry.get("count", 1))):
                params = _sample_params(archetype, entry, cls, rng, smap)
                pos, speed, acc, heading = motion_model(archetype, params, tau)
                if sigma > 0:
                    pos = pos + rng.normal(0.0, sigma, pos.shape)
                width, length = DEFAULT_DIMENSIONS[cls]
                states = tuple(
                    TrafficState(float(s), float(a), normalize_heading(float(h)), width, length, cls)
                    for s, a, h in zip(speed, acc, heading)
                )
                idx = counters.get(cls, 0)
                counters[cls] = idx + 1
                aid = f"{cls.value[0].lower()}{idx}"
                tracks.append(Track(aid, steps, pos, cls, states))
        meta = {"source": "synthetic", "seed": int(seed), "index": k}
        out.append(Scenario(tracks, smap, t_ob, total, dt, "m", meta))
    return out


def collect_futures(scenarios: Iterable[Scenario], steps: Optional[int] = None, predicate=None):
    """Normalized ground-truth futures of every target agent, grouped by class."""
    from .anchors import normalize_future
    from .scene import agent_frame_at

    out: dict[AgentClass, list[np.ndarray]] = {}
    for s in scenarios:
        horizon = s.future_steps if steps is None else steps
        for tr in s.target_agents(predicate):
            frame = agent_frame_at(tr, s.t_ob)
            out.setdefault(tr.agent_class, []).append(normalize_future(tr, frame, s.t_ob, horizon))
    return {c: np.array(v) for c, v in out.items()}
