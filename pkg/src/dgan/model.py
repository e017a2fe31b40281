"""Dynamic graph attention network.

Per agent, three embeddings are fused: a CNN feature patch cut from the
semantic-map raster at the agent's pixel, an LSTM encoding of the observed
track, and an MLP encoding of the traffic state. Stacked graph-attention
layers mix the fused features over attention-zone neighborhoods, and two
parallel heads turn [graph feature, fused feature] into hierarchical
(class, anchor) probabilities and per-anchor trajectory offsets.

All per-agent quantities are row-batched: one forward pass handles every
agent of a scenario. Positions fed to the network and offsets coming out are
in each agent's own frame at the last observed step.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet, nearest_anchor, normalize_future
from .autodiff import Tensor
from .errors import InsufficientHistory, MissingFeature, ShapeError
from .graph import DEFAULT_LAMBDA, build_graph
from .raster import rasterize, world_to_pixel
from .scene import (
    ALL_CLASSES,
    AgentClass,
    AgentFrame,
    Scenario,
    Track,
    agent_frame_at,
    derived_state,
    from_agent_frame,
    normalize_heading,
    to_agent_frame,
)

STATE_FEATURES = 6 + len(ALL_CLASSES)


@dataclass
class ModelConfig:
    d_map: int = 256
    d_traj: int = 256
    d_state: int = 128
    loc_embed: int = 64
    gat_layers: int = 2
    gat_hidden: int = 640
    head_hidden: int = 256
    cnn_channels: tuple = (8, 16, 16, 8)
    cnn_kernel: int = 3
    patch: int = 11
    raster_size: int = 200
    raster_resolution: float = 0.5
    use_map: bool = True
    local_cnn: bool = True  # per-agent crops; identical output, far cheaper
    t_ob: int = 10
    horizon: int = 15
    classes: tuple = ("Vehicle", "Cyclist", "Pedestrian")
    k_per_class: tuple = (20, 20, 20)
    lam: float = DEFAULT_LAMBDA
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        self.classes = tuple(self.classes)
        self.k_per_class = tuple(int(k) for k in self.k_per_class)
        if len(self.classes) != len(self.k_per_class):
            raise ShapeError("one anchor count per class required")
        if any(k < 1 for k in self.k_per_class):
            raise ShapeError("every class needs at least one anchor")
        if self.gat_layers < 1:
            raise ShapeError("at least one graph attention layer required")
        if self.patch % 2 != 1 or self.cnn_kernel % 2 != 1:
            raise ShapeError("patch and kernel sizes must be odd")

    @property
    def fused_dim(self) -> int:
        return self.d_map + self.d_traj + self.d_state

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def total_anchors(self) -> int:
        return sum(self.k_per_class)

    @property
    def agent_classes(self) -> list[AgentClass]:
        return [AgentClass.parse(c) for c in self.classes]

    def with_anchors(self, anchors: AnchorSet) -> "ModelConfig":
        """Copy with class list, anchor counts and horizon taken from ``anchors``."""
        d = asdict(self)
        d["classes"] = tuple(c.value for c in anchors.classes)
        d["k_per_class"] = tuple(anchors.k(c) for c in anchors.classes)
        d["horizon"] = anchors.horizon
        return ModelConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        d["classes"] = list(self.classes)
        d["k_per_class"] = list(self.k_per_class)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


Params = dict  # name -> Tensor


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    c_in = 3
    k = config.cnn_kernel
    for i, c_out in enumerate(config.cnn_channels):
        p[f"cnn.{i}.w"] = _uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        p[f"cnn.{i}.b"] = np.zeros((c_out, 1, 1))
        c_in = c_out
    patch_dim = c_in * config.patch * config.patch
    p["map.w"] = _uniform(rng, (patch_dim, config.d_map), patch_dim)
    p["map.b"] = np.zeros((1, config.d_map))

    u = config.d_traj
    p["traj.emb.w"] = _uniform(rng, (2, config.loc_embed), 2)
    p["traj.emb.b"] = np.zeros((1, config.loc_embed))
    p["traj.lstm.wx"] = _uniform(rng, (config.loc_embed, 4 * u), config.loc_embed)
    p["traj.lstm.wh"] = _uniform(rng, (u, 4 * u), u)
    b = np.zeros((1, 4 * u))
    b[0, u : 2 * u] = 1.0
    p["traj.lstm.b"] = b

    p["state.w"] = _uniform(rng, (STATE_FEATURES, config.d_state), STATE_FEATURES)
    p["state.b"] = np.zeros((1, config.d_state))

    f_in = config.fused_dim
    g = config.gat_hidden
    for layer in range(config.gat_layers):
        p[f"gat.{layer}.w"] = _uniform(rng, (f_in, g), f_in)
        p[f"gat.{layer}.a_src"] = _uniform(rng, (g, 1), 2 * g)
        p[f"gat.{layer}.a_dst"] = _uniform(rng, (g, 1), 2 * g)
        f_in = g

    head_in = g + config.fused_dim
    h = config.head_hidden
    n_cls = config.num_classes + config.total_anchors
    n_off = config.total_anchors * config.horizon * 2
    p["head.cls.0.w"] = _uniform(rng, (head_in, h), head_in)
    p["head.cls.0.b"] = np.zeros((1, h))
    p["head.cls.1.w"] = _uniform(rng, (h, n_cls), h)
    p["head.cls.1.b"] = np.zeros((1, n_cls))
    p["head.off.0.w"] = _uniform(rng, (head_in, h), head_in)
    p["head.off.0.b"] = np.zeros((1, h))
    p["head.off.1.w"] = _uniform(rng, (h, n_off), h)
    p["head.off.1.b"] = np.zeros((1, n_off))
    return {name: ad.parameter(v, name) for name, v in p.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {name: ad.parameter(np.array(v), name) for name, v in arrays.items() if not name.startswith("opt.")}


# ------------------------------------------------------------ input assembly


@dataclass
class SceneInputs:
    """Numeric inputs for one scenario, assembled once and reused across steps."""

    agent_ids: list[str]
    classes: list[AgentClass]
    frames: list[AgentFrame]
    observed: np.ndarray  # (N, t_ob, 2) agent-frame positions
    states: np.ndarray  # (N, STATE_FEATURES)
    mask: np.ndarray  # (N, N) neighborhoods incl. self
    raster: Optional[np.ndarray] = None  # (3, H, W) in [0, 1]
    agent_px: list = field(default_factory=list)
    # supervision, present only for target agents
    target_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    target_futures: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))  # agent frame
    target_kstar: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))  # flat anchor index
    target_class_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n(self) -> int:
        return len(self.agent_ids)


def observed_history(track: Track, frame: AgentFrame, t_ob: int, length: Optional[int] = None) -> np.ndarray:
    """(length, 2) agent-frame positions at steps ``t_ob-length+1 .. t_ob``.

    Steps before the first observation repeat the first point; gaps repeat
    the previous point.
    """
    length = t_ob if length is None else length
    obs = track.upto(t_ob)
    if len(obs) == 0:
        raise InsufficientHistory(f"agent {track.agent_id} has no observed points")
    local = to_agent_frame(frame, obs.xy)
    out = np.empty((length, 2))
    j = 0
    for n, t in enumerate(range(t_ob - length + 1, t_ob + 1)):
        while j + 1 < len(obs) and obs.timesteps[j + 1] <= t:
            j += 1
        out[n] = local[j]
    return out


def state_features(track: Track, scenario: Scenario, frame: AgentFrame) -> np.ndarray:
    """velocity, acceleration, heading relative to the frame (cos, sin), width, length, class one-hot."""
    st = derived_state(track, scenario.t_ob, scenario.frame_period)
    rel = normalize_heading(st.heading - frame.rotation)
    onehot = np.zeros(len(ALL_CLASSES))
    onehot[track.agent_class.index] = 1.0
    return np.concatenate([[st.velocity, st.acceleration, math.cos(rel), math.sin(rel), st.width, st.length], onehot])


def raster_center(scenario: Scenario, agents: list[Track]) -> tuple[float, float]:
    """Scenario-centered window: mean agent position at t_ob."""
    pts = np.array([a.position_at(scenario.t_ob) for a in agents])
    c = pts.mean(axis=0)
    return float(c[0]), float(c[1])


def prepare_scene(
    scenario: Scenario,
    config: ModelConfig,
    anchors: Optional[AnchorSet] = None,
    target_predicate=None,
    with_targets: bool = True,
) -> SceneInputs:
    agents = scenario.model_agents()
    if not agents:
        raise InsufficientHistory("scenario has no agent with >= 2 observed points at t_ob")
    frames = [agent_frame_at(a, scenario.t_ob) for a in agents]
    observed = np.stack([observed_history(a, f, scenario.t_ob, config.t_ob) for a, f in zip(agents, frames)])
    states = np.stack([state_features(a, scenario, f) for a, f in zip(agents, frames)])
    graph = build_graph(scenario, scenario.t_ob, config.lam, agents=agents)
    ids = [a.agent_id for a in agents]
    mask = graph.adjacency_matrix(ids)
    inputs = SceneInputs(ids, [a.agent_class for a in agents], frames, observed, states, mask)
    if config.use_map:
        img = rasterize(scenario.map, raster_center(scenario, agents), config.raster_size, config.raster_resolution)
        inputs.raster = img.channels_first()
        inputs.agent_px = [world_to_pixel(img, a.position_at(scenario.t_ob)) for a in agents]
    if with_targets and anchors is not None:
        targets = {t.agent_id for t in scenario.target_agents(target_predicate)}
        rows, futs, kstar, cls_idx = [], [], [], []
        for row, (a, f) in enumerate(zip(agents, frames)):
            if a.agent_id not in targets:
                continue
            if a.agent_class not in anchors.anchors:
                raise ShapeError(f"agent {a.agent_id}: class {a.agent_class.value} has no anchors")
            fut = normalize_future(a, f, scenario.t_ob, anchors.horizon)
            rows.append(row)
            futs.append(fut)
            kstar.append(anchors.offset(a.agent_class) + nearest_anchor(anchors, a.agent_class, fut))
            cls_idx.append(anchors.classes.index(a.agent_class))
        inputs.target_rows = np.array(rows, dtype=int)
        inputs.target_futures = np.array(futs).reshape(len(rows), anchors.horizon, 2)
        inputs.target_kstar = np.array(kstar, dtype=int)
        inputs.target_class_index = np.array(cls_idx, dtype=int)
    return inputs


# ------------------------------------------------------------------ encoders


def cnn_features(x, params: Params, config: ModelConfig) -> Tensor:
    pad = config.cnn_kernel // 2
    x = ad.as_tensor(x)
    for i in range(len(config.cnn_channels)):
        x = ad.relu(ad.add(ad.conv2d(x, params[f"cnn.{i}.w"], padding=pad), params[f"cnn.{i}.b"]))
    return x


def encode_map(raster: np.ndarray, agent_px, params: Params, config: ModelConfig) -> Tensor:
    """(N, d_map): CNN feature map, k x k patch per agent, single ReLU layer.

    With ``config.local_cnn`` the CNN runs on a crop around each agent that
    is wider than the patch by the stack's receptive-field margin and clipped
    to the image. Zero padding then falls at the same image borders, so the
    patch features equal those of the full-image pass exactly.
    """
    expected = (3, config.raster_size, config.raster_size)
    if raster.shape != expected:
        raise ShapeError(f"raster shape {raster.shape}, config expects {expected}")
    k = config.patch
    if not config.local_cnn:
        patches = ad.gather_patches(cnn_features(raster, params, config), agent_px, k)
        return ad.relu(ad.linear(patches, params["map.w"], params["map.b"]))
    size = config.raster_size
    margin = (config.cnn_kernel // 2) * len(config.cnn_channels)
    reach = k // 2 + margin
    rows = []
    for col, row in agent_px:
        col, row = int(col), int(row)
        r0, r1 = max(row - reach, 0), min(row + reach + 1, size)
        c0, c1 = max(col - reach, 0), min(col + reach + 1, size)
        if r0 >= r1 or c0 >= c1:
            rows.append(ad.Tensor(np.zeros((1, config.cnn_channels[-1] * k * k))))
            continue
        fmap = cnn_features(raster[:, r0:r1, c0:c1], params, config)
        rows.append(ad.gather_patches(fmap, [(col - c0, row - r0)], k))
    return ad.relu(ad.linear(ad.concat(rows, axis=0), params["map.w"], params["map.b"]))


def encode_trajectory(observed: np.ndarray, params: Params) -> Tensor:
    """(N, d_traj) final LSTM hidden state over embedded agent-frame positions."""
    observed = np.asarray(observed, dtype=np.float64)
    if observed.ndim != 3 or observed.shape[1] < 1:
        raise InsufficientHistory("empty observed history")
    n = observed.shape[0]
    u = params["traj.lstm.wh"].shape[0]
    h = ad.Tensor(np.zeros((n, u)))
    c = ad.Tensor(np.zeros((n, u)))
    for t in range(observed.shape[1]):
        e = ad.relu(ad.linear(ad.Tensor(observed[:, t, :]), params["traj.emb.w"], params["traj.emb.b"]))
        h, c = ad.lstm_cell(e, h, c, params["traj.lstm.wx"], params["traj.lstm.wh"], params["traj.lstm.b"])
    return h


def encode_state(states: np.ndarray, params: Params) -> Tensor:
    return ad.relu(ad.linear(ad.Tensor(np.atleast_2d(states)), params["state.w"], params["state.b"]))


def fuse(v_map: Tensor, v_traj: Tensor, v_state: Tensor, config: Optional[ModelConfig] = None) -> Tensor:
    if config is not None:
        dims = (v_map.shape[-1], v_traj.shape[-1], v_state.shape[-1])
        if dims != (config.d_map, config.d_traj, config.d_state):
            raise ShapeError(f"embedding dims {dims} do not match config")
    return ad.concat([v_map, v_traj, v_state], axis=-1)


def gat_layer(features: Tensor, mask: np.ndarray, params: Params, layer: int, slope: float = 0.2):
    """One single-head graph attention layer; returns (output (N, G), attention (N, N))."""
    n = features.shape[0]
    if mask.shape != (n, n):
        raise MissingFeature(f"{mask.shape[0]} vertices but features for {n}")
    wh = ad.matmul(features, params[f"gat.{layer}.w"])
    src = ad.matmul(wh, params[f"gat.{layer}.a_src"])  # (N, 1)
    dst = ad.reshape(ad.matmul(wh, params[f"gat.{layer}.a_dst"]), (1, n))
    logits = ad.leaky_relu(ad.add(src, dst), slope)
    attention = ad.masked_softmax(logits, mask)
    return ad.matmul(attention, wh), attention


@dataclass
class ModelOutput:
    class_probs: Tensor  # (N, C)
    anchor_probs: list  # per class: (N, K_c)
    joint: Tensor  # (N, sum K_c), flat (class, anchor) order
    offsets: Tensor  # (N, sum K_c * T * 2)
    fused: Tensor
    attention: list  # per layer (N, N) Tensor


def predict_head(p_final: Tensor, v_orig: Tensor, params: Params, config: ModelConfig):
    z = ad.concat([p_final, v_orig], axis=-1)
    hidden = ad.relu(ad.linear(z, params["head.cls.0.w"], params["head.cls.0.b"]))
    logits = ad.linear(hidden, params["head.cls.1.w"], params["head.cls.1.b"])
    c = config.num_classes
    class_probs = ad.softmax(logits[:, :c])
    anchor_probs = []
    joint_parts = []
    start = c
    for ci, k in enumerate(config.k_per_class):
        probs = ad.softmax(logits[:, start : start + k])
        anchor_probs.append(probs)
        joint_parts.append(ad.mul(class_probs[:, ci : ci + 1], probs))
        start += k
    joint = ad.concat(joint_parts, axis=-1)
    hidden_o = ad.relu(ad.linear(z, params["head.off.0.w"], params["head.off.0.b"]))
    offsets = ad.linear(hidden_o, params["head.off.1.w"], params["head.off.1.b"])
    return class_probs, anchor_probs, joint, offsets


def forward_tensors(inputs: SceneInputs, params: Params, config: ModelConfig) -> ModelOutput:
    n = inputs.n
    if config.use_map:
        if inputs.raster is None:
            raise ShapeError("model uses the map but the inputs carry no raster")
        v_map = encode_map(inputs.raster, inputs.agent_px, params, config)
    else:
        v_map = ad.Tensor(np.zeros((n, config.d_map)))
    v_traj = encode_trajectory(inputs.observed, params)
    v_state = encode_state(inputs.states, params)
    fused = fuse(v_map, v_traj, v_state, config)
    p = fused
    attention = []
    for layer in range(config.gat_layers):
        p, att = gat_layer(p, inputs.mask, params, layer, config.leaky_slope)
        attention.append(att)
        if layer < config.gat_layers - 1:
            p = ad.relu(p)
    class_probs, anchor_probs, joint, offsets = predict_head(p, fused, params, config)
    return ModelOutput(class_probs, anchor_probs, joint, offsets, fused, attention)


# ---------------------------------------------------------------- predictions


@dataclass
class Prediction:
    agent_id: str
    agent_class: AgentClass
    trajectories: np.ndarray  # (K, T, 2) world frame
    probabilities: np.ndarray  # (K,) joint prob(c) * prob(k | c)
    labels: list  # (class name, anchor index within class) per trajectory
    class_probs: np.ndarray
    offsets: np.ndarray  # (K, T, 2) agent frame
    frame: AgentFrame

    def ranked(self) -> np.ndarray:
        """Trajectory indices by decreasing probability; ties keep flat order."""
        return np.argsort(-self.probabilities, kind="stable")

    def top(self, n: int) -> np.ndarray:
        return self.trajectories[self.ranked()[:n]]


def decode(inputs: SceneInputs, out: ModelOutput, anchors: AnchorSet, config: ModelConfig) -> list[Prediction]:
    k, t = config.total_anchors, config.horizon
    offsets = out.offsets.data.reshape(inputs.n, k, t, 2)
    flat = anchors.stacked()
    labels = [(c.value, j) for c in anchors.classes for j in range(anchors.k(c))]
    preds = []
    for row in range(inputs.n):
        local = flat + offsets[row]
        world = from_agent_frame(inputs.frames[row], local)
        if not np.all(np.isfinite(world)):
            raise FloatingPointError(f"non-finite prediction for agent {inputs.agent_ids[row]}")
        preds.append(
            Prediction(
                inputs.agent_ids[row],
                inputs.classes[row],
                world,
                out.joint.data[row].copy(),
                labels,
                out.class_probs.data[row].copy(),
                offsets[row].copy(),
                inputs.frames[row],
            )
        )
    return preds


def forward(
    scenario: Scenario,
    anchors: AnchorSet,
    params: Params,
    config: ModelConfig,
    inputs: Optional[SceneInputs] = None,
) -> list[Prediction]:
    """Per-agent multi-modal predictions in world coordinates."""
    if inputs is None:
        inputs = prepare_scene(scenario, config, anchors, with_targets=False)
    out = forward_tensors(inputs, params, config)
    return decode(inputs, out, anchors, config)
