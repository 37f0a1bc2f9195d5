"""Observation payloads built from an episode snapshot.

All position matrices share the 2W x K mapping-matrix layout and hold raw
vehicle counts. Background vehicles only show up in the per-lane counts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .road_network import RoadNetwork, cell_of
from .traffic_sim import EpisodeState


@dataclass(frozen=True)
class AgentState:
    SF: np.ndarray
    SP: np.ndarray  # other pursuers
    SE: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.SF, self.SP, self.SE])


@dataclass(frozen=True)
class EnvInfo:
    SP: np.ndarray
    SE: np.ndarray
    BN: np.ndarray


def _cell(state: EpisodeState, grid: RoadNetwork, vid: int):
    veh = state.vehicles[vid]
    return cell_of(grid, grid.lane_road_position(veh.lane, veh.s))


def _count(state: EpisodeState, grid: RoadNetwork, ids) -> np.ndarray:
    mat = np.zeros((grid.layout.rows, grid.layout.cols), dtype=np.int64)
    for vid in ids:
        c = _cell(state, grid, vid)
        mat[c.row, c.col] += 1
    return mat


def encode_agent_state(episode: EpisodeState, grid: RoadNetwork, m: int) -> AgentState:
    ego = episode.pursuers[m]
    others = [p for p in episode.pursuers if p != ego]
    return AgentState(
        _count(episode, grid, [ego]),
        _count(episode, grid, others),
        _count(episode, grid, episode.alive_evaders),
    )


def encode_env_info(episode: EpisodeState, grid: RoadNetwork) -> EnvInfo:
    bn = np.zeros(len(grid.lanes), dtype=np.int64)
    for vid in episode.background:
        veh = episode.vehicles[vid]
        if veh.alive:
            bn[veh.lane] += 1
    return EnvInfo(
        _count(episode, grid, episode.pursuers),
        _count(episode, grid, episode.alive_evaders),
        bn,
    )


def format_matrix(mat: np.ndarray) -> str:
    width = max(1, len(str(int(mat.max(initial=0)))))
    return "\n".join(" ".join(f"{int(v):>{width}d}" for v in row) for row in mat)
