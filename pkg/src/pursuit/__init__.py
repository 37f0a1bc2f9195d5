"""Hierarchical multi-vehicle pursuit: grid traffic simulator, attention state
encoder, per-pursuer DQNs and a coordinating joint-action network."""

from .config import RunConfig, load_config
from .road_network import GridSpec, RoadNetwork, Turn, build_grid, cell_of, valid_turns
from .traffic_sim import SimConfig, reset, step

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "RoadNetwork",
    "RunConfig",
    "SimConfig",
    "Turn",
    "build_grid",
    "cell_of",
    "load_config",
    "reset",
    "step",
    "valid_turns",
]
