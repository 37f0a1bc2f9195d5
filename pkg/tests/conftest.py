from __future__ import annotations

import numpy as np
import pytest

from pursuit.config import load_config
from pursuit.road_network import GridSpec, build_grid
from pursuit.traffic_sim import EpisodeState, Role, SimConfig, Vehicle

TINY_OVERRIDES = [
    "grid.W=2", "grid.scene_side=400", "grid.K=4",
    "sim.M=2", "sim.N=1", "sim.B=0", "sim.d_capture=30", "sim.episode_cap=300",
]


def tiny_config(*extra: str):
    return load_config(None, [*TINY_OVERRIDES, *extra])


def small_config(*extra: str):
    """3x3 grid where turns matter; cheap enough for short training runs."""
    return load_config(None, [
        "grid.W=3", "grid.scene_side=600", "grid.K=4",
        "sim.M=2", "sim.N=1", "sim.B=4", "sim.d_capture=30", "sim.episode_cap=120",
        "model.channels=4,4", "model.d_att=8", "model.d_out=16", "model.head_hidden=8", "model.coord_hidden=16,8",
        "train.batch_size=8", "train.coord_batch_size=8", "train.eval_episodes=3", *extra,
    ])


def make_state(placements, sim: SimConfig | None = None, grid_spec: GridSpec | None = None, clock: int = 0):
    """Hand-built episode. ``placements`` holds (role, lane, s, v) tuples."""
    grid = build_grid(grid_spec or GridSpec())
    vehicles, pursuers, evaders = [], [], []
    for k, (role, lane, s, v) in enumerate(placements):
        veh = Vehicle(k, Role(role), lane, float(s), float(v))
        if veh.role is Role.EVADER:
            veh.route = (lane, _straight_next(grid, lane))
        vehicles.append(veh)
        (pursuers if veh.role is Role.PURSUER else evaders if veh.role is Role.EVADER else []).append(k)
    cfg = sim or SimConfig(M=len(pursuers), N=len(evaders), B=len(vehicles) - len(pursuers) - len(evaders))
    return EpisodeState(cfg, grid, vehicles, pursuers, evaders, np.random.default_rng(0), clock=clock)


def _straight_next(grid, lane_id):
    from pursuit.road_network import valid_turns
    lane = grid.lanes[lane_id]
    turn = valid_turns(grid, lane.dst, lane.heading)[-1]
    return grid.out_lane(lane.dst, lane.heading.turned(turn)).id


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance check, echoed at the end of the run regardless of capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
