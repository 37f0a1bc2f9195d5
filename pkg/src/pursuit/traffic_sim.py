"""Discrete-time microsimulator for the pursuit scene.

Vehicles are points on directed lanes. Each lane ends at a stop line in front
of its destination intersection. A vehicle may only pass a stop line after it
has claimed the outgoing lane it is about to enter; a claim needs a green
signal, an unclaimed target lane and room at the start of that lane. Claims
are exclusive, so at most one vehicle is ever merging into a lane.

Speeds follow ``v' = min(v + a_max*dt, v_max)`` unless that would break the
braking envelope: every vehicle must always be able to stop, braking at
``b_max``, at least ``min_headway`` behind the vehicle ahead (or at the stop
line when it holds no claim). Keeping that envelope is what makes the
no-overlap and bounded-deceleration properties hold together.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import math
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .road_network import ACTIONS, Heading, RoadNetwork, Turn, valid_turns


class Role(str, Enum):
    PURSUER = "pursuer"
    EVADER = "evader"
    BACKGROUND = "background"


Corner = tuple[int, int]


@dataclass(frozen=True)
class SimConfig:
    M: int = 4
    N: int = 2
    B: int = 50
    a_max: float = 0.8
    b_max: float = 4.5
    v_max: float = 20.0
    d_capture: float = 50.0
    dt: float = 1.0
    min_headway: float = 7.5
    episode_cap: int = 1000
    # each route is a closed loop given by its corner intersections (i, j)
    evader_routes: tuple[tuple[Corner, ...], ...] | None = None

    def validate(self) -> None:
        if self.M < 1 or self.N < 1 or self.B < 0:
            raise ConfigError(f"sim: need M >= 1, N >= 1, B >= 0 (got M={self.M}, N={self.N}, B={self.B})")
        if self.M <= self.N:
            raise ConfigError(f"sim.M must exceed sim.N (got M={self.M}, N={self.N})")
        for key in ("a_max", "b_max", "v_max", "d_capture", "dt", "min_headway"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"sim.{key} must be positive")
        if self.episode_cap < 1:
            raise ConfigError("sim.episode_cap must be >= 1")
        if self.evader_routes is not None and len(self.evader_routes) == 0:
            raise ConfigError("sim.evader_routes must not be empty")


@dataclass
class Vehicle:
    id: int
    role: Role
    lane: int
    s: float
    v: float = 0.0
    planned_turn: Turn | None = None
    route: tuple[int, ...] = ()
    route_idx: int = 0
    alive: bool = True
    next_lane: int | None = None  # set while the vehicle holds a claim


@dataclass(frozen=True)
class CaptureEvent:
    evader: int
    pursuers: tuple[int, ...]
    clock: int

    @property
    def g(self) -> int:
        return len(self.pursuers)


@dataclass
class StepEvents:
    captures: list[CaptureEvent]
    done: bool
    # per pursuer (index m): evader id -> Euclidean distance
    dist_before: list[dict[int, float]]
    dist_after: list[dict[int, float]]


@dataclass
class EpisodeState:
    config: SimConfig
    grid: RoadNetwork
    vehicles: list[Vehicle]
    pursuers: list[int]
    evaders: list[int]
    rng: np.random.Generator
    clock: int = 0
    claims: dict[int, int] = field(default_factory=dict)
    capture_log: list[CaptureEvent] = field(default_factory=list)

    @property
    def alive_evaders(self) -> list[int]:
        return [e for e in self.evaders if self.vehicles[e].alive]

    @property
    def background(self) -> list[int]:
        return [v.id for v in self.vehicles if v.role is Role.BACKGROUND]

    @property
    def done(self) -> bool:
        return not self.alive_evaders or self.clock >= self.config.episode_cap

    def xy(self, vid: int) -> tuple[float, float]:
        veh = self.vehicles[vid]
        return self.grid.lane_xy(veh.lane, veh.s)

    def signal_phases(self) -> list[str]:
        return [green_axis(self, node) for node in range(len(self.grid.nodes))]

    def fingerprint(self) -> bytes:
        """Byte string capturing the full dynamic state, for determinism checks."""
        rows = np.array(
            [
                (
                    veh.lane,
                    veh.s,
                    veh.v,
                    float(veh.alive),
                    -1 if veh.next_lane is None else veh.next_lane,
                    -1 if veh.planned_turn is None else int(veh.planned_turn),
                    veh.route_idx,
                )
                for veh in self.vehicles
            ],
            dtype=np.float64,
        )
        claims = np.array(sorted(self.claims.items()), dtype=np.int64).ravel()
        log = np.array(
            [x for c in self.capture_log for x in (c.evader, c.clock, c.g, *c.pursuers)], dtype=np.int64
        )
        return rows.tobytes() + claims.tobytes() + log.tobytes() + np.int64(self.clock).tobytes()

    def record(self, events: StepEvents | None = None) -> dict:
        """JSON-serializable snapshot used for trajectory dumps."""
        vehicles = []
        for veh in self.vehicles:
            x, y = self.grid.lane_xy(veh.lane, veh.s)
            vehicles.append(
                {
                    "id": veh.id,
                    "role": veh.role.value,
                    "lane": veh.lane,
                    "s": round(veh.s, 6),
                    "x": round(x, 6),
                    "y": round(y, 6),
                    "v": round(veh.v, 6),
                    "alive": veh.alive,
                }
            )
        rec = {"clock": self.clock, "vehicles": vehicles}
        if events is not None:
            rec["captures"] = [
                {"evader": c.evader, "pursuers": list(c.pursuers), "clock": c.clock} for c in events.captures
            ]
            rec["done"] = events.done
        return rec


def green_axis(state: EpisodeState, node: int) -> str:
    i, j = state.grid.node_ij(node)
    cycle = state.grid.spec.signal_cycle
    t = state.clock * state.config.dt + (cycle if (i + j) % 2 else 0.0)
    return "h" if int(t // cycle) % 2 == 0 else "v"


def stopping_distance(v: float, b: float, dt: float) -> float:
    """Distance travelled while braking at ``b`` from ``v`` to rest, one Euler step at a time."""
    if v <= 0:
        return 0.0
    n = math.floor(v / (b * dt))
    return dt * (n * v - b * dt * n * (n + 1) / 2)


def _max_speed_within(room: float, b: float, dt: float, v_cap: float) -> float:
    # largest v with v*dt + stopping_distance(v) <= room; the left side is
    # piecewise linear and increasing in v
    if room <= 0:
        return 0.0
    n = 0
    while True:
        v = (room + dt * dt * b * n * (n + 1) / 2) / (dt * (n + 1))
        if v < (n + 1) * b * dt:
            return v
        n += 1
        if n * b * dt >= v_cap:
            return v_cap


# --------------------------------------------------------------------- routes


def default_routes(grid: RoadNetwork) -> tuple[tuple[Corner, ...], ...]:
    e = grid.W - 1
    m = max(1, math.ceil(e / 2))
    return (
        ((0, 0), (e, 0), (e, e), (0, e)),
        ((0, 0), (0, e), (e, e), (e, 0)),
        ((0, 0), (m, 0), (m, m), (0, m)),
        ((e - m, e - m), (e - m, e), (e, e), (e, e - m)),
    )


def expand_route(grid: RoadNetwork, corners: Sequence[Corner]) -> tuple[int, ...]:
    """Turn a closed corner loop into the cyclic sequence of lanes it drives."""
    if len(corners) < 2:
        raise ConfigError("sim.evader_routes: a route needs at least two corners")
    W = grid.W
    nodes: list[int] = []
    for (i1, j1), (i2, j2) in zip(corners, list(corners[1:]) + [corners[0]]):
        for c in (i1, j1, i2, j2):
            if not 0 <= c < W:
                raise ConfigError(f"sim.evader_routes: corner outside grid in {corners}")
        if (i1 != i2) == (j1 != j2):
            raise ConfigError(f"sim.evader_routes: corners ({i1},{j1}) -> ({i2},{j2}) are not axis-aligned")
        di = (i2 > i1) - (i2 < i1)
        dj = (j2 > j1) - (j2 < j1)
        i, j = i1, j1
        while (i, j) != (i2, j2):
            nodes.append(grid.node_id(i, j))
            i, j = i + di, j + dj
    lanes = tuple(grid.lane_for(a, b).id for a, b in zip(nodes, nodes[1:] + nodes[:1]))
    for cur, nxt in zip(lanes, lanes[1:] + lanes[:1]):
        if grid.lanes[cur].road == grid.lanes[nxt].road:
            raise ConfigError(f"sim.evader_routes: route {corners} requires a U-turn")
    return lanes


# ---------------------------------------------------------------------- reset


def reset(config: SimConfig, grid: RoadNetwork, seed) -> EpisodeState:
    config.validate()
    rng = np.random.default_rng(seed)
    routes = [expand_route(grid, r) for r in (config.evader_routes or default_routes(grid))]
    n_roads = len(grid.roads)
    if config.M + config.N > n_roads:
        raise ConfigError(f"sim: M + N = {config.M + config.N} exceeds the {n_roads} spawn roads")

    vehicles: list[Vehicle] = []
    used_roads: set[int] = set()

    evaders = []
    for _ in range(config.N):
        route = routes[int(rng.integers(len(routes)))]
        free = [k for k, lid in enumerate(route) if grid.lanes[lid].road not in used_roads]
        if not free:
            raise ConfigError("sim.evader_routes: not enough distinct roads to spawn every evader")
        k = free[int(rng.integers(len(free)))]
        lane = grid.lanes[route[k]]
        used_roads.add(lane.road)
        evaders.append(len(vehicles))
        vehicles.append(Vehicle(len(vehicles), Role.EVADER, lane.id, lane.length / 2, route=route, route_idx=k))

    pursuers = []
    free_roads = [r for r in range(n_roads) if r not in used_roads]
    for road in rng.choice(free_roads, size=config.M, replace=False):
        lane = grid.lanes[2 * int(road) + int(rng.integers(2))]
        used_roads.add(lane.road)
        pursuers.append(len(vehicles))
        vehicles.append(Vehicle(len(vehicles), Role.PURSUER, lane.id, lane.length / 2))

    spacing = max(20.0, 2 * config.min_headway)
    slots = []
    for lane in grid.lanes:
        taken = [veh.s for veh in vehicles if veh.lane == lane.id]
        for k in range(int(lane.length // spacing)):
            s = (k + 0.5) * spacing
            if all(abs(s - t) >= spacing for t in taken):
                slots.append((lane.id, s))
    if config.B > len(slots):
        raise ConfigError(f"sim.B = {config.B} exceeds the {len(slots)} background spawn slots")
    state = EpisodeState(config, grid, vehicles, pursuers, evaders, rng)
    for idx in sorted(rng.choice(len(slots), size=config.B, replace=False)):
        lane_id, s = slots[int(idx)]
        veh = Vehicle(len(vehicles), Role.BACKGROUND, lane_id, s)
        vehicles.append(veh)
        _draw_background_turn(state, veh)
    return state


def _draw_background_turn(state: EpisodeState, veh: Vehicle) -> None:
    lane = state.grid.lanes[veh.lane]
    turns = valid_turns(state.grid, lane.dst, lane.heading)
    veh.planned_turn = turns[int(state.rng.integers(len(turns)))]


# ----------------------------------------------------------------- decisions


def decision_point(state: EpisodeState, m: int) -> tuple[int, Heading]:
    """Intersection (and arrival heading) where pursuer m's next decision applies."""
    veh = state.vehicles[state.pursuers[m]]
    lane = state.grid.lanes[veh.next_lane if veh.next_lane is not None else veh.lane]
    return lane.dst, lane.heading


def decision_mask(state: EpisodeState, m: int) -> np.ndarray:
    node, heading = decision_point(state, m)
    turns = valid_turns(state.grid, node, heading)
    mask = np.array([t in turns for t in ACTIONS], dtype=bool)
    if not mask.any():
        raise ContractError(f"pursuer {m} has no legal turn at node {node}")
    return mask


def capture_distances(state: EpisodeState, m: int) -> dict[int, float]:
    px, py = state.xy(state.pursuers[m])
    out = {}
    for e in state.alive_evaders:
        ex, ey = state.xy(e)
        out[e] = math.hypot(ex - px, ey - py)
    return out


# ---------------------------------------------------------------------- step


def _target_lane(state: EpisodeState, veh: Vehicle) -> int:
    lane = state.grid.lanes[veh.lane]
    if veh.role is Role.EVADER:
        return veh.route[(veh.route_idx + 1) % len(veh.route)]
    turn = veh.planned_turn
    if turn is None:
        turn = valid_turns(state.grid, lane.dst, lane.heading)[-1]
    out = state.grid.out_lane(lane.dst, lane.heading.turned(turn))
    if out is None:
        raise ContractError(f"vehicle {veh.id} planned an impossible turn {turn.name} at node {lane.dst}")
    return out.id


def step(state: EpisodeState, joint_actions: Sequence[int]) -> tuple[EpisodeState, StepEvents]:
    """Advance the episode by one timestep, mutating and returning ``state``."""
    cfg, grid = state.config, state.grid
    if state.done:
        raise ContractError("step called on a finished episode")
    if len(joint_actions) != len(state.pursuers):
        raise ContractError(f"expected {len(state.pursuers)} actions, got {len(joint_actions)}")
    for m, a in enumerate(joint_actions):
        a = int(a)
        if a not in (0, 1, 2) or not decision_mask(state, m)[a]:
            raise ContractError(f"action {a} is not legal for pursuer {m} at its next intersection")
        state.vehicles[state.pursuers[m]].planned_turn = Turn(a)

    before = [capture_distances(state, m) for m in range(len(state.pursuers))]

    live = [veh for veh in state.vehicles if veh.alive]
    by_lane: dict[int, list[Vehicle]] = {}
    for veh in live:
        by_lane.setdefault(veh.lane, []).append(veh)
    leader_s: dict[int, float] = {}
    last_s: dict[int, float] = {}
    for lane_id, group in by_lane.items():
        group.sort(key=lambda v: (-v.s, v.id))
        for ahead, behind in zip(group, group[1:]):
            leader_s[behind.id] = ahead.s
        last_s[lane_id] = group[-1].s

    a, b, dt, h = cfg.a_max, cfg.b_max, cfg.dt, cfg.min_headway

    def room_past_line(target: int) -> float:
        tail = last_s.get(target)
        length = grid.lanes[target].length
        return length if tail is None else min(tail - h, length)

    moves = []
    for veh in live:
        lane = grid.lanes[veh.lane]
        hi = min(veh.v + a * dt, cfg.v_max)
        lo = max(0.0, veh.v - b * dt)
        if veh.id in leader_s:
            limit = leader_s[veh.id] - h
        elif veh.next_lane is not None:
            limit = lane.length + room_past_line(veh.next_lane)
        else:
            limit = lane.length
            if veh.s + hi * dt + stopping_distance(hi, b, dt) > lane.length:
                target = _target_lane(state, veh)
                tail = last_s.get(target)
                if (
                    green_axis(state, lane.dst) == lane.heading.axis
                    and target not in state.claims
                    and (tail is None or tail >= h)
                ):
                    state.claims[target] = veh.id
                    veh.next_lane = target
                    if veh.role is Role.PURSUER:
                        veh.planned_turn = None
                    limit = lane.length + room_past_line(target)
        v_new = min(hi, max(lo, _max_speed_within(limit - veh.s, b, dt, hi)))
        moves.append((veh, v_new))

    for veh, v_new in moves:
        lane = grid.lanes[veh.lane]
        s_new = veh.s + v_new * dt
        veh.v = v_new
        if veh.next_lane is not None and s_new > lane.length:
            del state.claims[veh.next_lane]
            veh.lane, veh.next_lane = veh.next_lane, None
            veh.s = min(s_new - lane.length, grid.lanes[veh.lane].length)
            if veh.role is Role.EVADER:
                veh.route_idx = (veh.route_idx + 1) % len(veh.route)
            elif veh.role is Role.BACKGROUND:
                _draw_background_turn(state, veh)
        else:
            veh.s = min(s_new, lane.length)

    captures = []
    pxy = [state.xy(p) for p in state.pursuers]
    for e in state.alive_evaders:
        ex, ey = state.xy(e)
        near = tuple(m for m, (px, py) in enumerate(pxy) if math.hypot(ex - px, ey - py) < cfg.d_capture)
        if near:
            captures.append(CaptureEvent(e, near, state.clock + 1))
    for event in captures:
        veh = state.vehicles[event.evader]
        veh.alive = False
        if veh.next_lane is not None:
            del state.claims[veh.next_lane]
            veh.next_lane = None
    state.capture_log.extend(captures)
    state.clock += 1

    after = [capture_distances(state, m) for m in range(len(state.pursuers))]
    return state, StepEvents(captures, state.done, before, after)


def headway_gaps(state: EpisodeState) -> list[float]:
    """Gaps between consecutive live vehicles on every lane."""
    by_lane: dict[int, list[float]] = {}
    for veh in state.vehicles:
        if veh.alive:
            by_lane.setdefault(veh.lane, []).append(veh.s)
    gaps = []
    for positions in by_lane.values():
        positions.sort()
        gaps.extend(b - a for a, b in zip(positions, positions[1:]))
    return gaps
