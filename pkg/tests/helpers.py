"""Shared fixtures: a small 3-agent scenario, tiny model configs, random anchors."""
import math

import numpy as np

from dgan.anchors import AnchorSet
from dgan.model import ModelConfig
from dgan.scene import (
    DEFAULT_DIMENSIONS,
    AgentClass,
    MapElement,
    MapKind,
    Scenario,
    SemanticMap,
    Track,
    TrafficState,
)

V, C, P = AgentClass.VEHICLE, AgentClass.CYCLIST, AgentClass.PEDESTRIAN

TINY = dict(
    d_map=3,
    d_traj=3,
    d_state=2,
    loc_embed=2,
    gat_hidden=4,
    head_hidden=3,
    cnn_channels=(2,),
    patch=3,
    raster_size=12,
    raster_resolution=4.0,
    t_ob=5,
)

SMALL = dict(
    d_map=8,
    d_traj=8,
    d_state=6,
    loc_embed=4,
    gat_hidden=12,
    head_hidden=10,
    cnn_channels=(2, 2),
    patch=5,
    raster_size=40,
    raster_resolution=1.0,
    t_ob=5,
)


def toy_map() -> SemanticMap:
    return SemanticMap(
        [
            MapElement(MapKind.LANE_CENTERLINE, [(-20, 0), (20, 0)]),
            MapElement(MapKind.PEDESTRIAN_CROSSING, [(4, -6), (8, -6), (8, 6), (4, 6)]),
            MapElement(MapKind.ROAD_BOUNDARY, [(-20, 4), (20, 4)]),
            MapElement(MapKind.MOVABLE_OBSTACLE_BOX, [(-10, -3), (-6, -3), (-6, -1), (-10, -1)]),
        ],
        (-20, -20, 20, 20),
    )


def _states(cls, xy, dt, heading_override=None):
    w, l = DEFAULT_DIMENSIONS[cls]
    d = np.diff(xy, axis=0, prepend=xy[:1] - (xy[1:2] - xy[:1]))
    out = []
    for k, (dx, dy) in enumerate(d):
        h = math.atan2(dy, dx) if heading_override is None else heading_override
        out.append(TrafficState(float(math.hypot(dx, dy) / dt), 0.0, h, w, l, cls))
    return out


def toy_scenario(t_ob=5, t_f=8, with_states=True, jitter=0.0, seed=0) -> Scenario:
    """Vehicle, cyclist and pedestrian close enough to interact; all present 1..t_f."""
    rng = np.random.default_rng(seed)
    dt = 0.4
    t = np.arange(1, t_f + 1)
    xy_v = np.stack([-8 + 1.5 * t, 0.2 * np.sin(t)], axis=1)
    xy_c = np.stack([-2 + 1.0 * t, 2.5 + 0.3 * t + 0.05 * t * t], axis=1)
    xy_p = np.stack([6 + 0.05 * t * t, -4 + 0.5 * t], axis=1)
    tracks = []
    for aid, cls, xy in (("veh", V, xy_v), ("cyc", C, xy_c), ("ped", P, xy_p)):
        xy = xy + rng.normal(0, jitter, xy.shape) if jitter else xy
        states = _states(cls, xy, dt) if with_states else None
        tracks.append(Track("%s" % aid, t, xy, cls, states))
    return Scenario(tracks, toy_map(), t_ob, t_f, dt)


def random_anchors(horizon=3, k=2, seed=0, classes=(V, C, P)) -> AnchorSet:
    rng = np.random.default_rng(seed)
    return AnchorSet({c: np.cumsum(rng.normal(0.8, 0.5, (k, horizon, 2)), axis=1) for c in classes})


def tiny_config(anchors, **kw) -> ModelConfig:
    return ModelConfig(**dict(TINY, **kw)).with_anchors(anchors)


def small_config(anchors, **kw) -> ModelConfig:
    return ModelConfig(**dict(SMALL, **kw)).with_anchors(anchors)


def jitter_params(params, seed=1, scale=0.3):
    """Shift every parameter by U(-scale, scale) so no ReLU sits on a kink at zero."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = p.data + rng.uniform(-scale, scale, p.data.shape)
    return params


def rigid(theta, tx, ty):
    c, s = math.cos(theta), math.sin(theta)

    def f(p):
        p = np.asarray(p, dtype=np.float64)
        return np.stack([c * p[..., 0] - s * p[..., 1] + tx, s * p[..., 0] + c * p[..., 1] + ty], axis=-1)

    return f


def transform_scenario(s: Scenario, theta: float, tx: float, ty: float) -> Scenario:
    """Rotate by ``theta`` and translate the whole scene; headings and map rotate with it."""
    from dgan.scene import normalize_heading

    f = rigid(theta, tx, ty)
    tracks = []
    for tr in s.agents:
        states = None
        if tr.states is not None:
            states = [
                TrafficState(st.velocity, st.acceleration, normalize_heading(st.heading + theta), st.width, st.length, st.agent_class)
                for st in tr.states
            ]
        tracks.append(Track(tr.agent_id, tr.timesteps, f(tr.xy), tr.agent_class, states))
    elements = [MapElement(el.kind, f(el.geometry)) for el in s.map.elements]
    corners = f(np.array([[s.map.bounds[0], s.map.bounds[1]], [s.map.bounds[2], s.map.bounds[3]],
                          [s.map.bounds[0], s.map.bounds[3]], [s.map.bounds[2], s.map.bounds[1]]]))
    bounds = (corners[:, 0].min(), corners[:, 1].min(), corners[:, 0].max(), corners[:, 1].max())
    return Scenario(tracks, SemanticMap(elements, bounds), s.t_ob, s.t_f, s.frame_period, s.units, dict(s.metadata))


def loss_closure(inputs, params, config, anchors, alpha=1.0):
    """Scalar loss of one prepared scene, for finite-difference checks."""
    from dgan.model import forward_tensors
    from dgan.training import loss_total

    def fn():
        return loss_total(forward_tensors(inputs, params, config), inputs, anchors, alpha).total

    return fn
