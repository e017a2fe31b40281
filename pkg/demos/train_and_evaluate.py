"""
Anchors, a short training run and an evaluation
===============================================

A compact end-to-end pass on synthetic data: cluster ground-truth futures
into per-class anchors, train a small model for a few hundred steps and
compare it with the constant-velocity line fit.

Runs in about a minute on one core.
"""
import time

from dgan.anchors import kmeans_anchors
from dgan.data import DEFAULT_SYNTH_SPEC, collect_futures, synth_scenarios
from dgan.metrics import dgan_predictor, evaluate, linear_predictor
from dgan.model import ModelConfig, init_params, prepare_scene
from dgan.training import TrainingConfig, train

spec = dict(DEFAULT_SYNTH_SPEC, num_scenarios=24)
train_scenes = synth_scenarios(spec, seed=0)
test_scenes = synth_scenarios(dict(spec, num_scenarios=8), seed=1000)

anchors = kmeans_anchors(collect_futures(train_scenes), 8, seed=0)
print("anchor populations:", anchors.metadata["populations"])

###############################################################################
# A narrower model than the default keeps this demo quick.
cfg = ModelConfig(d_map=32, d_traj=32, d_state=16, gat_hidden=80, head_hidden=64).with_anchors(anchors)
params = init_params(cfg, seed=0)
inputs = [prepare_scene(s, cfg, anchors) for s in train_scenes]

t0 = time.perf_counter()
history = train(inputs, params, cfg, anchors, TrainingConfig(steps=300, batch_size=4, learning_rate=3e-3))
print(f"loss {history[0].loss_total:.3f} -> {history[-1].loss_total:.3f} in {time.perf_counter() - t0:.0f} s")

report = evaluate(
    {"dgan": dgan_predictor(params, cfg, anchors), "linear": linear_predictor(anchors.horizon)},
    test_scenes,
    anchors.horizon,
    n=5,
)
print(report.to_table())
