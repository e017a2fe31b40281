"""Multi-class trajectory prediction with dynamic graph attention over attention-zone neighborhoods."""

from .anchors import AnchorSet, kmeans_anchors, nearest_anchor, uniform_sample_anchors
from .data import load_ethucy, load_scenario_json, save_scenario_json, synth_scenarios, window_scenarios
from .errors import *  # noqa: F401,F403
from .graph import attention_radius, build_graph, zones_intersect
from .metrics import ade, evaluate, fde, linear_baseline, min_ade_n, min_fde_n
from .model import ModelConfig, Prediction, forward, init_params, prepare_scene
from .raster import rasterize
from .scene import AgentClass, MapElement, MapKind, Scenario, SemanticMap, TrafficState, Track
from .training import TrainingConfig, loss_class, loss_offset, loss_total, train, train_step

__version__ = "0.1.0"
