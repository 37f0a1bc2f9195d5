import numpy as np
import pytest

from pursuit.road_network import GridSpec, RoadPosition, build_grid, cell_of
from pursuit.state_codec import encode_agent_state, encode_env_info, format_matrix
from pursuit.traffic_sim import SimConfig, decision_mask, reset, step

from conftest import make_state


def test_single_pursuer_has_empty_others():
    s = make_state([("pursuer", 0, 100, 0), ("evader", 30, 500, 0)], sim=SimConfig(M=1, N=1, B=0))
    a = encode_agent_state(s, s.grid, 0)
    assert a.SP.sum() == 0 and a.SF.sum() == 1 and a.SE.sum() == 1


def test_other_pursuers_counted_per_cell():
    # two other pursuers share one cell; ego is elsewhere
    s = make_state([("pursuer", 0, 100, 0), ("pursuer", 30, 10, 0), ("pursuer", 30, 40, 0), ("evader", 44, 500, 0)],
                   sim=SimConfig(M=3, N=1, B=0))
    a = encode_agent_state(s, s.grid, 0)
    assert a.SP.sum() == 2
    assert a.SP.max() == 2 and np.count_nonzero(a.SP) == 1
    b = encode_agent_state(s, s.grid, 1)
    assert b.SP.sum() == 2 and np.count_nonzero(b.SP) == 2


def test_no_background_gives_zero_bn():
    grid = build_grid(GridSpec())
    s = reset(SimConfig(B=0), grid, 0)
    assert encode_env_info(s, grid).BN.sum() == 0


def test_pursuers_on_one_channel():
    grid = build_grid(GridSpec())
    row0 = [r.id for r in grid.roads if r.channel_row == 0]
    lanes = [2 * row0[0], 2 * row0[1], 2 * row0[2], 2 * row0[0] + 1]
    s = make_state([("pursuer", lanes[k], 300 + 10 * k, 0) for k in range(4)] + [("evader", 30, 500, 0)])
    env = encode_env_info(s, grid)
    assert env.SP[0].sum() == 4 and env.SP.sum() == 4


def _recount(state, grid, ids):
    mat = np.zeros((2 * grid.W, grid.K), dtype=np.int64)
    for vid in ids:
        veh = state.vehicles[vid]
        lane = grid.lanes[veh.lane]
        road = grid.roads[lane.road]
        off = veh.s if lane.src == road.a else lane.length - veh.s
        mat[road.channel_row, cell_of(grid, RoadPosition(road.id, off)).col] += 1
    return mat


def test_matrices_match_recount_oracle():
    grid = build_grid(GridSpec())
    rng = np.random.default_rng(1)
    s = reset(SimConfig(episode_cap=200), grid, 4)
    n_bn = 0
    while not s.done:
        env = encode_env_info(s, grid)
        for m in range(4):
            a = encode_agent_state(s, grid, m)
            ego = s.pursuers[m]
            assert np.array_equal(a.SF, _recount(s, grid, [ego]))
            assert np.array_equal(a.SP, _recount(s, grid, [p for p in s.pursuers if p != ego]))
            assert np.array_equal(a.SE, _recount(s, grid, s.alive_evaders))
            assert a.SE.sum() == len(s.alive_evaders)
        bn = np.bincount([s.vehicles[b].lane for b in s.background], minlength=len(grid.lanes))
        assert np.array_equal(env.BN, bn) and env.BN.sum() == 50
        n_bn += 1
        acts = [int(rng.choice(np.flatnonzero(decision_mask(s, m)))) for m in range(4)]
        s, _ = step(s, acts)
    assert n_bn > 10


def test_agent_and_env_views_agree():
    grid = build_grid(GridSpec())
    s = reset(SimConfig(), grid, 9)
    env = encode_env_info(s, grid)
    for m in range(4):
        a = encode_agent_state(s, grid, m)
        assert np.array_equal(a.SE, env.SE)
        assert np.array_equal(a.SF + a.SP, env.SP)
        assert a.stacked().shape == (3, 8, 10)


def test_background_never_in_position_matrices():
    grid = build_grid(GridSpec())
    s = reset(SimConfig(B=50), grid, 2)
    env = encode_env_info(s, grid)
    assert env.SP.sum() == 4 and env.SE.sum() == 2


def test_format_matrix_aligns_columns():
    out = format_matrix(np.array([[0, 12], [3, 0]]))
    assert out.splitlines() == [" 0 12", " 3  0"]
