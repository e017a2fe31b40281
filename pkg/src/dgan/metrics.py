"""Displacement metrics, evaluation reports and the linear / LSTM baselines."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import InsufficientData, InsufficientHistory, ShapeError
from .scene import ALL_CLASSES, AgentClass, Scenario, Track, agent_frame_at, from_agent_frame, to_agent_frame

DEFAULT_N = 5


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim < 2 or pred.shape[-1] != 2 or pred.shape[-2] < 1:
        raise ShapeError(f"trajectory shapes differ or are empty: {pred.shape} vs {gt.shape}")
    return pred, gt


def ade(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def _ranked_set(prediction, n: int) -> np.ndarray:
    """Top-n trajectories of a Prediction (or of an already ranked (K, T, 2) array)."""
    trajs = prediction.top(n) if hasattr(prediction, "top") else np.asarray(prediction)[:n]
    total = len(prediction.trajectories) if hasattr(prediction, "trajectories") else len(prediction)
    if not 1 <= n <= total:
        raise ValueError(f"n={n} outside 1..{total}")
    return trajs


def min_ade_n(prediction, gt, n: int) -> float:
    return min(ade(p, gt) for p in _ranked_set(prediction, n))


def min_fde_n(prediction, gt, n: int) -> float:
    return min(fde(p, gt) for p in _ranked_set(prediction, n))


# ------------------------------------------------------------------- reports


@dataclass
class AgentResult:
    scenario: int
    agent_id: str
    agent_class: AgentClass
    ade: float  # top-1
    fde: float
    min_ade: float
    min_fde: float


@dataclass
class Row:
    method: str
    subset: str  # "overall" or a class name
    count: int
    ade: float
    fde: float
    min_ade: float
    min_fde: float


@dataclass
class EvalReport:
    rows: list[Row]
    n: int = DEFAULT_N
    config: dict = field(default_factory=dict)
    results: dict[str, list[AgentResult]] = field(default_factory=dict)

    def row(self, method: str, subset: str = "overall") -> Row:
        for r in self.rows:
            if r.method == method and r.subset == subset:
                return r
        raise KeyError((method, subset))

    @property
    def columns(self) -> list[str]:
        return ["method", "subset", "count", "ADE", "FDE", f"minADE_{self.n}", f"minFDE_{self.n}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r.method, r.subset, r.count] + [_fmt(v) for v in (r.ade, r.fde, r.min_ade, r.min_fde)])
        return buf.getvalue()

    def to_table(self) -> str:
        cols = self.columns
        body = [
            [r.method, r.subset, str(r.count)] + [_fmt(v, 4) for v in (r.ade, r.fde, r.min_ade, r.min_fde)]
            for r in self.rows
        ]
        widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
        line = lambda cells: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))
        out = [line(cols), "  ".join("-" * w for w in widths)]
        out += [line(b) for b in body]
        return "\n".join(out) + "\n"


def _fmt(v: float, digits: Optional[int] = None) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return repr(float(v)) if digits is None else f"{v:.{digits}f}"


def aggregate(method: str, results: Sequence[AgentResult]) -> list[Row]:
    """Overall row plus one row per class present; means use compensated summation."""

    def row(subset, rs):
        k = len(rs)
        mean = lambda attr: math.fsum(getattr(r, attr) for r in rs) / k if k else float("nan")
        return Row(method, subset, k, mean("ade"), mean("fde"), mean("min_ade"), mean("min_fde"))

    rows = [row("overall", results)]
    for cls in ALL_CLASSES:
        rs = [r for r in results if r.agent_class is cls]
        if rs:
            rows.append(row(cls.value, rs))
    return rows


# A predictor maps a scenario to {agent_id: (trajectories (K, T, 2) world, probabilities (K,))}.
Predictor = Callable[[Scenario], dict]


def evaluate_predictor(
    method: str,
    predictor: Predictor,
    scenarios: Sequence[Scenario],
    horizon: int,
    n: int = DEFAULT_N,
    predicate=None,
) -> list[AgentResult]:
    results = []
    for si, s in enumerate(scenarios):
        targets = s.target_agents(predicate)
        if not targets:
            continue
        preds = predictor(s)
        for tr in targets:
            fut = tr.between(s.t_ob + 1, s.t_ob + horizon)
            if len(fut) != horizon:
                continue
            trajs, probs = preds[tr.agent_id]
            order = np.argsort(-np.asarray(probs), kind="stable")
            ranked = np.asarray(trajs)[order]
            m = min(n, len(ranked))
            results.append(
                AgentResult(
                    si,
                    tr.agent_id,
                    tr.agent_class,
                    ade(ranked[0], fut.xy),
                    fde(ranked[0], fut.xy),
                    min_ade_n(ranked, fut.xy, m),
                    min_fde_n(ranked, fut.xy, m),
                )
            )
    return results


def evaluate(
    predictors: dict[str, Predictor],
    scenarios: Sequence[Scenario],
    horizon: int,
    n: int = DEFAULT_N,
    predicate=None,
    config: Optional[dict] = None,
) -> EvalReport:
    """One EvalReport with overall and per-class rows for every named predictor."""
    rows, per_method = [], {}
    for name, pred in predictors.items():
        res = evaluate_predictor(name, pred, scenarios, horizon, n, predicate)
        if not res:
            raise InsufficientData("no evaluable target agents")
        per_method[name] = res
        rows.extend(aggregate(name, res))
    return EvalReport(rows, n, dict(config or {}), per_method)


def dgan_predictor(params, config, anchors) -> Predictor:
    from .model import forward

    def predict(s: Scenario) -> dict:
        return {p.agent_id: (p.trajectories, p.probabilities) for p in forward(s, anchors, params, config)}

    return predict


# ------------------------------------------------------------ linear baseline


def linear_baseline(track: Track, horizon: int, t_ob: Optional[int] = None, window: Optional[int] = None) -> np.ndarray:
    """Least-squares line in time per coordinate over the observed points, extrapolated.

    ``window`` limits the fit to the last ``window`` observed steps.
    """
    hist = track if t_ob is None else track.upto(t_ob)
    if window is not None:
        hist = hist.between(int(hist.timesteps[-1]) - window + 1, int(hist.timesteps[-1])) if len(hist) else hist
    if len(hist) < 2:
        raise InsufficientHistory(f"agent {track.agent_id}: linear fit needs >= 2 observed points")
    last = int(hist.timesteps[-1]) if t_ob is None else t_ob
    t = hist.timesteps.astype(np.float64)
    tf = np.arange(last + 1, last + horizon + 1, dtype=np.float64)
    tc = t.mean()
    tt = t - tc
    xy = hist.xy
    mean = xy.mean(axis=0)
    slope = (tt[:, None] * (xy - mean)).sum(axis=0) / (tt * tt).sum()
    return mean + (tf - tc)[:, None] * slope


def linear_predictor(horizon: int) -> Predictor:
    def predict(s: Scenario) -> dict:
        return {tr.agent_id: (linear_baseline(tr, horizon, s.t_ob)[None], np.ones(1)) for tr in s.model_agents()}

    return predict


# -------------------------------------------------------------- LSTM baseline


@dataclass
class LSTMBaselineConfig:
    embed: int = 32
    hidden: int = 64
    t_ob: int = 8
    horizon: int = 12

    def to_dict(self) -> dict:
        return dict(embed=self.embed, hidden=self.hidden, t_ob=self.t_ob, horizon=self.horizon)


def init_lstm_baseline(cfg: LSTMBaselineConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    e, h = cfg.embed, cfg.hidden
    u = lambda shape, fan: rng.uniform(-1.0, 1.0, shape) / np.sqrt(fan)
    arrays = {
        "lstm.emb.w": u((2, e), 2),
        "lstm.emb.b": np.zeros((1, e)),
        "lstm.enc.wx": u((e, 4 * h), e),
        "lstm.enc.wh": u((h, 4 * h), h),
        "lstm.enc.b": np.zeros((1, 4 * h)),
        "lstm.dec.wx": u((e, 4 * h), e),
        "lstm.dec.wh": u((h, 4 * h), h),
        "lstm.dec.b": np.zeros((1, 4 * h)),
        "lstm.out.w": u((h, 2), h),
        "lstm.out.b": np.zeros((1, 2)),
    }
    return {k: ad.parameter(v, k) for k, v in arrays.items()}


def zero_lstm_baseline(cfg: LSTMBaselineConfig) -> dict[str, Tensor]:
    return {k: ad.parameter(np.zeros_like(v.data), k) for k, v in init_lstm_baseline(cfg).items()}


def lstm_rollout(observed: np.ndarray, params, cfg: LSTMBaselineConfig) -> Tensor:
    """(N, t_ob, 2) agent-frame history -> (N, horizon, 2) agent-frame future.

    The encoder reads observed displacements; the decoder emits one
    displacement per step, fed back as its next input.
    """
    observed = np.asarray(observed, dtype=np.float64)
    n = observed.shape[0]
    disp = np.diff(observed, axis=1)
    if disp.shape[1] < 1:
        raise InsufficientHistory("LSTM baseline needs >= 2 observed points")
    hdim = params["lstm.enc.wh"].shape[0]
    h = ad.Tensor(np.zeros((n, hdim)))
    c = ad.Tensor(np.zeros((n, hdim)))
    embed = lambda d: ad.relu(ad.linear(d, params["lstm.emb.w"], params["lstm.emb.b"]))
    for t in range(disp.shape[1]):
        h, c = ad.lstm_cell(embed(ad.Tensor(disp[:, t])), h, c, params["lstm.enc.wx"], params["lstm.enc.wh"], params["lstm.enc.b"])
    d = ad.Tensor(disp[:, -1])
    pos = ad.Tensor(observed[:, -1])
    out = []
    for _ in range(cfg.horizon):
        h, c = ad.lstm_cell(embed(d), h, c, params["lstm.dec.wx"], params["lstm.dec.wh"], params["lstm.dec.b"])
        d = ad.linear(h, params["lstm.out.w"], params["lstm.out.b"])
        pos = ad.add(pos, d)
        out.append(ad.reshape(pos, (n, 1, 2)))
    return ad.concat(out, axis=1)


def _history(track: Track, t_ob: int, length: int):
    from .model import observed_history

    frame = agent_frame_at(track, t_ob)
    return frame, observed_history(track, frame, t_ob, length)


def lstm_baseline(tracks: Sequence[Track], params, cfg: LSTMBaselineConfig, t_ob: int) -> list[np.ndarray]:
    """World-frame forecasts for each track from its history up to ``t_ob``."""
    if not tracks:
        return []
    frames, obs = zip(*(_history(tr, t_ob, cfg.t_ob) for tr in tracks))
    local = lstm_rollout(np.stack(obs), params, cfg).data
    return [from_agent_frame(f, l) for f, l in zip(frames, local)]


def lstm_predictor(params, cfg: LSTMBaselineConfig) -> Predictor:
    def predict(s: Scenario) -> dict:
        agents = s.model_agents()
        out = lstm_baseline(agents, params, cfg, s.t_ob)
        return {tr.agent_id: (o[None], np.ones(1)) for tr, o in zip(agents, out)}

    return predict


def lstm_training_set(scenarios: Iterable[Scenario], cfg: LSTMBaselineConfig, predicate=None):
    """(observed (N, t_ob, 2), futures (N, horizon, 2)) in each agent's frame."""
    obs, fut = [], []
    for s in scenarios:
        for tr in s.target_agents(predicate):
            f = tr.between(s.t_ob + 1, s.t_ob + cfg.horizon)
            if len(f) != cfg.horizon:
                continue
            frame, o = _history(tr, s.t_ob, cfg.t_ob)
            obs.append(o)
            fut.append(to_agent_frame(frame, f.xy))
    if not obs:
        raise InsufficientData("no training futures for the LSTM baseline")
    return np.stack(obs), np.stack(fut)


def train_lstm_baseline(
    observed: np.ndarray,
    futures: np.ndarray,
    cfg: LSTMBaselineConfig,
    steps: int = 500,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    params=None,
    callback=None,
):
    """Adam on mean squared position error; returns (params, per-step losses)."""
    from .training import Adam

    params = params or init_lstm_baseline(cfg, seed)
    opt = Adam(lr)
    rng = np.random.default_rng([seed, 1])
    n = len(observed)
    trace = []
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False) if n > batch_size else np.arange(n)
        ad.zero_grads(params.values())
        with Tape() as tape:
            pred = lstm_rollout(observed[idx], params, cfg)
            res = ad.sub(pred, futures[idx])
            loss = ad.mean(ad.mul(res, res))
        tape.backward(loss)
        opt.step(params)
        trace.append(loss.item())
        if callback is not None:
            callback(step + 1, trace[-1])
    return params, trace
