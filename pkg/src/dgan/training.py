"""Anchor classification + offset regression losses and the training loop."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet
from .autodiff import Tape, Tensor
from .errors import ConfigError, NonFiniteError, ShapeError
from .model import ModelConfig, ModelOutput, Params, SceneInputs, forward_tensors

PROB_FLOOR = 1e-12


@dataclass
class TrainingConfig:
    alpha: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 1
    epochs: int = 1
    steps: Optional[int] = None  # overrides epochs when set
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- losses


def loss_offset(pred, gt) -> Tensor:
    """Mean over timesteps of the Euclidean residual norm; (..., T, 2) -> (...)."""
    pred, gt = ad.as_tensor(pred), ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"loss_offset: {pred.shape} vs {gt.shape}")
    res = ad.sub(pred, gt)
    norms = ad.sqrt(ad.tsum(ad.mul(res, res), axis=-1))
    return ad.mean(norms, axis=-1)


def loss_class(class_probs, anchor_probs, c_star: int, k_star: int) -> Tensor:
    """-log(prob(c*) * prob(k* | c*)), probabilities floored at 1e-12.

    ``anchor_probs`` is the list of per-class anchor distributions.
    """
    class_probs = ad.as_tensor(class_probs)
    if not 0 <= c_star < class_probs.shape[-1]:
        raise IndexError(f"class index {c_star} out of range")
    ap = ad.as_tensor(anchor_probs[c_star])
    if not 0 <= k_star < ap.shape[-1]:
        raise IndexError(f"anchor index {k_star} out of range")
    joint = ad.mul(class_probs[..., c_star], ap[..., k_star])
    return ad.mul(ad.log(ad.clamp_min(joint, PROB_FLOOR)), -1.0)


@dataclass
class LossTerms:
    total: Tensor  # sum over target agents
    class_sum: Tensor
    offset_sum: Tensor
    count: int


def loss_total(out: ModelOutput, inputs: SceneInputs, anchors: AnchorSet, alpha: float) -> LossTerms:
    """Sum over target agents of class loss + alpha * offset loss at the matched anchor only."""
    rows = inputs.target_rows
    if len(rows) == 0:
        zero = ad.Tensor(0.0)
        return LossTerms(zero, zero, zero, 0)
    k_total = anchors.total
    t = anchors.horizon
    kstar = inputs.target_kstar
    joint = ad.getitem(out.joint, (rows, kstar))
    cls = ad.mul(ad.log(ad.clamp_min(joint, PROB_FLOOR)), -1.0)
    offsets = ad.reshape(out.offsets, (inputs.n, k_total, t, 2))
    # the indicator: only the matched anchor's offsets enter the graph
    matched = ad.getitem(offsets, (rows, kstar))
    pred = ad.add(matched, anchors.stacked()[kstar])
    off = loss_offset(pred, inputs.target_futures)
    class_sum = ad.tsum(cls)
    offset_sum = ad.tsum(off)
    total = ad.add(class_sum, ad.mul(offset_sum, alpha))
    return LossTerms(total, class_sum, offset_sum, len(rows))


# ---------------------------------------------------------------- optimizers


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            g2 = np.multiply(g, g)
            g2 *= 1.0 - b2
            v += g2
            denom = np.multiply(v, 1.0 / c2, out=g2)
            np.sqrt(denom, out=denom)
            denom += self.eps
            step = np.multiply(m, self.lr / c1)
            step /= denom
            p.data -= step

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array([float(self.t)])}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays.get("opt.step", np.zeros(1))[0])
        self.m = {k[6:]: np.array(v) for k, v in arrays.items() if k.startswith("opt.m.")}
        self.v = {k[6:]: np.array(v) for k, v in arrays.items() if k.startswith("opt.v.")}


class SGD:
    def __init__(self, lr=1e-2, **_):
        self.lr = lr
        self.t = 0

    def step(self, params: Params) -> None:
        self.t += 1
        for p in params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def state(self) -> dict[str, np.ndarray]:
        return {"opt.step": np.array([float(self.t)])}

    def load_state(self, arrays) -> None:
        self.t = int(arrays.get("opt.step", np.zeros(1))[0])


def make_optimizer(cfg: TrainingConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return SGD(cfg.learning_rate)


# ---------------------------------------------------------------- train loop


@dataclass
class StepResult:
    loss_total: float
    loss_class: float  # per target agent
    loss_offset: float  # per target agent
    agents: int


def batch_loss(batch: Sequence[SceneInputs], params: Params, model_cfg: ModelConfig, anchors: AnchorSet, alpha: float):
    """Accumulate gradients of the agent-averaged loss over ``batch``; returns StepResult."""
    count = sum(len(s.target_rows) for s in batch)
    if count == 0:
        return StepResult(0.0, 0.0, 0.0, 0)
    tot = cls = off = 0.0
    for scene in batch:
        if len(scene.target_rows) == 0:
            continue
        with Tape() as tape:
            out = forward_tensors(scene, params, model_cfg)
            terms = loss_total(out, scene, anchors, alpha)
            objective = ad.mul(terms.total, 1.0 / count)
        tape.backward(objective)
        tot += terms.total.item()
        cls += terms.class_sum.item()
        off += terms.offset_sum.item()
    return StepResult(tot / count, cls / count, off / count, count)


def train_step(batch, params: Params, model_cfg: ModelConfig, anchors: AnchorSet, cfg: TrainingConfig, optimizer):
    """forward -> loss -> backward -> optimizer update. Parameters are updated in place."""
    ad.zero_grads(params.values())
    try:
        result = batch_loss(batch, params, model_cfg, anchors, cfg.alpha)
    except NonFiniteError as exc:
        raise NonFiniteError(f"training aborted at optimizer step {optimizer.t + 1}: {exc}") from exc
    if not np.isfinite(result.loss_total):
        raise NonFiniteError("training aborted: non-finite loss")
    optimizer.step(params)
    return params, result


def batch_schedule(n_scenes: int, batch_size: int, seed: int, step: int) -> list[int]:
    """Scene indices for global step ``step``; a fresh permutation per epoch."""
    per_epoch = max(1, -(-n_scenes // batch_size))
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n_scenes)
    return order[pos * batch_size : (pos + 1) * batch_size].tolist()


LOG_FIELDS = ("step", "loss_class", "loss_offset", "loss_total", "wall_ms")


def save_checkpoint(path, params: Params, optimizer, meta: dict) -> None:
    tensors = {name: p.data for name, p in params.items()}
    tensors.update(optimizer.state())
    ad.save_tensors(path, tensors)
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path):
    """(param arrays, optimizer arrays, metadata dict)."""
    arrays = ad.load_tensors(path)
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    opt = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return params, opt, meta


def train(
    scenes: Sequence[SceneInputs],
    params: Params,
    model_cfg: ModelConfig,
    anchors: AnchorSet,
    cfg: TrainingConfig,
    optimizer=None,
    log_path=None,
    checkpoint_path=None,
    checkpoint_meta: Optional[dict] = None,
    callback=None,
):
    """Run ``cfg.steps`` (or ``cfg.epochs`` worth of) optimizer steps.

    Resumes from ``optimizer.t`` when an optimizer with restored state is
    passed. Returns the list of per-step StepResults run by this call.
    """
    optimizer = optimizer or make_optimizer(cfg)
    per_epoch = max(1, -(-len(scenes) // cfg.batch_size))
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    history = []
    log_file = writer = None
    if log_path is not None:
        resume = optimizer.t > 0 and Path(log_path).exists()
        log_file = open(log_path, "a" if resume else "w", newline="")
        writer = csv.writer(log_file)
        if not resume:
            writer.writerow(LOG_FIELDS)
    try:
        while optimizer.t < total_steps:
            step = optimizer.t
            t0 = time.perf_counter()
            batch = [scenes[i] for i in batch_schedule(len(scenes), cfg.batch_size, cfg.seed, step)]
            _, result = train_step(batch, params, model_cfg, anchors, cfg, optimizer)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            history.append(result)
            if writer is not None:
                writer.writerow(
                    [step + 1, repr(result.loss_class), repr(result.loss_offset), repr(result.loss_total), f"{wall_ms:.3f}"]
                )
            if callback is not None:
                callback(step + 1, result)
            if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, optimizer, checkpoint_meta or {})
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, optimizer, checkpoint_meta or {})
    return history
