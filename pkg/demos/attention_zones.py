"""
Attention zones and the interaction graph
=========================================

Each agent carries a circle of radius v * T + lambda * L. Two agents are
neighbors when their circles touch. Here we generate one synthetic scene,
list the radii, print the edges and render the map to a PNG.
"""
import numpy as np

from dgan.data import synth_scenarios
from dgan.graph import build_graph
from dgan.raster import rasterize, save_raster

scene = synth_scenarios(seed=4)[0]
graph = build_graph(scene, scene.t_ob)

# radii grow with speed; a parked pedestrian still gets half a body length
for vid in graph.vertices:
    z = graph.zones[vid]
    cls = scene.agent(vid).agent_class.value
    print(f"{vid:>4} {cls:<10} center=({z.center[0]:7.2f}, {z.center[1]:7.2f}) r={z.radius:6.2f} m")

print("\nedges:")
print(graph.dump() or "(none)")

m = graph.adjacency_matrix()
print("degree (self-loop included):", m.sum(axis=1))

###############################################################################
# The same scene's map as the model sees it: 3 channels, lower-left origin.
xy = np.array([a.position_at(scene.t_ob) for a in scene.model_agents()])
img = rasterize(scene.map, tuple(xy.mean(axis=0)), 200, 0.5)
save_raster(img, "attention_zones_map.png")
print("wrote attention_zones_map.png", img.digest()[:16])
