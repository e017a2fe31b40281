"""
Checking tape gradients against finite differences
==================================================

Every parameter of a tiny model is nudged by +-h and the loss re-evaluated.
The reported number is max |analytic - numeric| / max(1, |analytic|).
"""
import numpy as np

from dgan.anchors import AnchorSet
from dgan.data import synth_scenarios
from dgan.gradcheck import check_gradients
from dgan.model import ModelConfig, forward_tensors, init_params, prepare_scene
from dgan.training import loss_total

scene = synth_scenarios(dict(num_scenarios=1, t_ob=4, t_f_steps=3, frame_period=0.4, agents=[
    {"class": "Vehicle", "count": 2, "archetype": "constant_velocity"},
    {"class": "Pedestrian", "count": 1, "archetype": "constant_velocity"},
]), seed=2)[0]

rng = np.random.default_rng(0)
anchors = AnchorSet({cls: np.cumsum(rng.normal(1, 0.3, (2, 3, 2)), axis=1) for cls in {a.agent_class for a in scene.agents}})
cfg = ModelConfig(d_map=3, d_traj=3, d_state=2, loc_embed=2, gat_hidden=4, head_hidden=3, cnn_channels=(2,),
                  patch=3, raster_size=12, raster_resolution=4.0, t_ob=4).with_anchors(anchors)
params = init_params(cfg, seed=0)
for p in params.values():  # keep ReLUs off their kink
    p.data += rng.uniform(-0.3, 0.3, p.data.shape)

inputs = prepare_scene(scene, cfg, anchors)
errors = check_gradients(lambda: loss_total(forward_tensors(inputs, params, cfg), inputs, anchors, 1.0).total,
                         list(params.values()))
for name, err in sorted(errors.items(), key=lambda kv: -kv[1])[:8]:
    print(f"{name:<20} {err:.2e}")
print("worst:", f"{max(errors.values()):.2e}", "over", sum(p.data.size for p in params.values()), "weights")
