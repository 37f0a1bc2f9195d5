"""Closed W x W grid of intersections, channels and the 2W x K cell layout."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
import math

from .errors import ConfigError


class Turn(IntEnum):
    LEFT = 0
    RIGHT = 1
    STRAIGHT = 2
    UTURN = 3


ACTIONS = (Turn.LEFT, Turn.RIGHT, Turn.STRAIGHT)


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def vector(self) -> tuple[int, int]:
        return _VECTORS[self]

    @property
    def axis(self) -> str:
        return "h" if self in (Heading.EAST, Heading.WEST) else "v"

    def turned(self, turn: Turn) -> "Heading":
        if turn == Turn.LEFT:
            return Heading((self - 1) % 4)
        if turn == Turn.RIGHT:
            return Heading((self + 1) % 4)
        if turn == Turn.UTURN:
            return Heading((self + 2) % 4)
        return self


_VECTORS = {
    Heading.NORTH: (0, 1),
    Heading.EAST: (1, 0),
    Heading.SOUTH: (0, -1),
    Heading.WEST: (-1, 0),
}


@dataclass(frozen=True)
class GridSpec:
    W: int = 4
    K: int = 10
    scene_side: float = 3000.0
    signal_cycle: float = 30.0
    lanes_per_direction: int = 1

    def validate(self) -> None:
        if self.W < 2:
            raise ConfigError(f"grid.W must be >= 2, got {self.W}")
        if self.K < 1:
            raise ConfigError(f"grid.K must be >= 1, got {self.K}")
        if not self.scene_side > 0:
            raise ConfigError(f"grid.scene_side must be positive, got {self.scene_side}")
        if not self.signal_cycle > 0:
            raise ConfigError(f"grid.signal_cycle must be positive, got {self.signal_cycle}")
        if self.lanes_per_direction != 1:
            raise ConfigError("grid.lanes_per_direction must be 1")

    @property
    def n_roads(self) -> int:
        return 2 * self.W * (self.W - 1)


@dataclass(frozen=True)
class Road:
    id: int
    axis: str  # "h" (east-west) or "v" (north-south)
    a: int  # lower endpoint node (west / south)
    b: int  # upper endpoint node (east / north)
    channel_row: int  # row in the mapping matrix
    start: float  # coordinate of `a` along the channel
    length: float


@dataclass(frozen=True)
class Lane:
    id: int
    road: int
    src: int
    dst: int
    heading: Heading
    length: float


@dataclass(frozen=True)
class CellIndex:
    row: int
    col: int


@dataclass(frozen=True)
class MappingMatrixLayout:
    row_order: tuple[str, ...]
    rows: int
    cols: int


@dataclass(frozen=True)
class RoadPosition:
    """A point on a road, measured from the road's west/south endpoint."""

    road: int
    offset: float


@dataclass(frozen=True)
class RoadNetwork:
    spec: GridSpec
    spacing: float
    nodes: tuple[tuple[float, float], ...]
    roads: tuple[Road, ...]
    lanes: tuple[Lane, ...]
    layout: MappingMatrixLayout
    _out_lane: dict = field(repr=False, compare=False, default_factory=dict)

    @property
    def W(self) -> int:
        return self.spec.W

    @property
    def K(self) -> int:
        return self.spec.K

    @property
    def channel_length(self) -> float:
        return self.spacing * (self.W - 1)

    def node_id(self, i: int, j: int) -> int:
        return j * self.W + i

    def node_ij(self, node: int) -> tuple[int, int]:
        return node % self.W, node // self.W

    def out_lane(self, node: int, heading: Heading) -> Lane | None:
        lid = self._out_lane.get((node, heading))
        return None if lid is None else self.lanes[lid]

    def lane_for(self, src: int, dst: int) -> Lane:
        for lane in self.lanes:
            if lane.src == src and lane.dst == dst:
                return lane
        raise KeyError(f"no lane from node {src} to node {dst}")

    def lane_xy(self, lane_id: int, s: float) -> tuple[float, float]:
        lane = self.lanes[lane_id]
        x0, y0 = self.nodes[lane.src]
        dx, dy = lane.heading.vector
        return x0 + dx * s, y0 + dy * s

    def lane_road_position(self, lane_id: int, s: float) -> RoadPosition:
        lane = self.lanes[lane_id]
        if lane.heading in (Heading.EAST, Heading.NORTH):
            return RoadPosition(lane.road, s)
        return RoadPosition(lane.road, lane.length - s)


def build_grid(spec: GridSpec) -> RoadNetwork:
    spec.validate()
    W = spec.W
    spacing = spec.scene_side / (W - 1)
    nodes = tuple((i * spacing, j * spacing) for j in range(W) for i in range(W))

    roads: list[Road] = []
    # east-west roads, channel hc_j sits in row 2j
    for j in range(W):
        for i in range(W - 1):
            roads.append(Road(len(roads), "h", j * W + i, j * W + i + 1, 2 * j, i * spacing, spacing))
    # north-south roads, channel vc_i sits in row 2i+1
    for i in range(W):
        for j in range(W - 1):
            roads.append(Road(len(roads), "v", j * W + i, (j + 1) * W + i, 2 * i + 1, j * spacing, spacing))

    lanes: list[Lane] = []
    out_lane: dict[tuple[int, Heading], int] = {}
    for road in roads:
        fwd, back = (Heading.EAST, Heading.WEST) if road.axis == "h" else (Heading.NORTH, Heading.SOUTH)
        for src, dst, heading in ((road.a, road.b, fwd), (road.b, road.a, back)):
            lane = Lane(len(lanes), road.id, src, dst, heading, road.length)
            out_lane[(src, heading)] = lane.id
            lanes.append(lane)

    row_order = tuple(name for k in range(1, W + 1) for name in (f"hc{k}", f"vc{k}"))
    layout = MappingMatrixLayout(row_order, 2 * W, spec.K)
    return RoadNetwork(spec, spacing, nodes, tuple(roads), tuple(lanes), layout, out_lane)


def cell_of(network: RoadNetwork, position: RoadPosition) -> CellIndex:
    """Map an on-road position to its mapping-matrix cell.

    Cells are half-open intervals of equal length along the channel; the far
    end of the channel belongs to the last cell.
    """
    if not 0 <= position.road < len(network.roads):
        raise ValueError(f"position is off-road: unknown road {position.road}")
    road = network.roads[position.road]
    if not -1e-9 <= position.offset <= road.length + 1e-9:
        raise ValueError(f"position is off-road: offset {position.offset} outside road {road.id}")
    coord = road.start + min(max(position.offset, 0.0), road.length)
    col = math.floor(coord * network.K / network.channel_length)
    return CellIndex(road.channel_row, min(max(col, 0), network.K - 1))


def valid_turns(network: RoadNetwork, intersection: int, incoming_heading: Heading) -> tuple[Turn, ...]:
    """Turns at `intersection` whose outgoing road exists, in action order.

    A U-turn is offered only when nothing else is available.
    """
    turns = tuple(t for t in ACTIONS if network.out_lane(intersection, incoming_heading.turned(t)) is not None)
    if not turns:
        return (Turn.UTURN,)
    return turns
