"""Capacitated queue-network simulator for a grid of road segments.

Each directed segment carries one mid-segment sensor that counts the
vehicles passing it per step. Vehicles are tracked as counts per
(segment, age) slot: a segment with traversal time tau has tau slots and
an end queue. At the end of a segment, vehicles pick uniformly among the
open downstream segments (no U-turns) that still have entry capacity this
step, or wait. Boundary inbound stubs inject Poisson arrivals; boundary
outbound stubs drain into sinks.

Closing a segment removes the vehicles on it from the network (they are
counted as diverted exits) and blocks new entries until it reopens.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from .context import DistanceTensor, SensorFeatureTensor

DAY_SECONDS = 86400
DEFAULT_STRIDE = 300
DEFAULT_START = 1578268800  # 2020-01-06T00:00:00Z


@dataclass
class Segment:
    index: int
    sensor_id: str
    start: int  # node ids
    end: int
    length: float  # metres
    capacity: int  # vehicles per step, entry and discharge
    traversal: int  # steps
    kind: str  # "internal", "source" or "sink"
    direction: tuple  # unit (drow, dcol)
    base_rate: float = 0.0  # mean arrivals per step for sources


@dataclass
class GridNetwork:
    rows: int
    cols: int
    segments: list
    n_nodes: int
    downstream: list  # per segment, indices of segments a vehicle may turn into
    stride: int = DEFAULT_STRIDE

    @property
    def n_sensors(self) -> int:
        return len(self.segments)

    @property
    def sensor_ids(self) -> list:
        return [s.sensor_id for s in self.segments]

    @property
    def sources(self) -> list:
        return [s.index for s in self.segments if s.kind == "source"]

    def segment_at(self, r: int, c: int, direction: tuple) -> int:
        """Internal segment leaving intersection (r, c) in ``direction``."""
        node = r * self.cols + c
        for s in self.segments:
            if s.kind == "internal" and s.start == node and s.direction == direction:
                return s.index
        raise KeyError((r, c, direction))


def build_grid(rows: int, cols: int, *, horizontal_length: float = 4500.0, vertical_length: float = 3000.0,
               stub_length: float = 2400.0, speed: float = 10.0, capacity: int = 120,
               stride: int = DEFAULT_STRIDE, rate_range: tuple = (25.0, 45.0), seed: int = 0) -> GridNetwork:
    """rows x cols intersections joined by two-way roads, with an inbound and an
    outbound stub at every boundary position (corners get one pair per side).

    The sensor count is 4*rows*cols + 2*(rows + cols).
    """
    rng = np.random.default_rng(seed)
    segments: list[Segment] = []
    n_inter = rows * cols

    def tau(length):
        return max(1, math.ceil(length / (speed * stride)))

    def add(start, end, length, kind, direction):
        idx = len(segments)
        segments.append(Segment(idx, f"s{idx:03d}", start, end, float(length), capacity, tau(length),
                                kind, direction))
        return idx

    for r in range(rows):
        for c in range(cols):
            node = r * cols + c
            if c + 1 < cols:
                add(node, node + 1, horizontal_length, "internal", (0, 1))
                add(node + 1, node, horizontal_length, "internal", (0, -1))
            if r + 1 < rows:
                add(node, node + cols, vertical_length, "internal", (1, 0))
                add(node + cols, node, vertical_length, "internal", (-1, 0))
    terminal = n_inter
    boundary = ([(0, c, (-1, 0)) for c in range(cols)] + [(rows - 1, c, (1, 0)) for c in range(cols)]
                + [(r, 0, (0, -1)) for r in range(rows)] + [(r, cols - 1, (0, 1)) for r in range(rows)])
    for r, c, outward in boundary:
        node = r * cols + c
        inward = (-outward[0], -outward[1])
        add(terminal, node, stub_length, "source", inward)
        add(node, terminal, stub_length, "sink", outward)
        terminal += 1
    for s in segments:
        if s.kind == "source":
            s.base_rate = float(rng.uniform(*rate_range))
    downstream = []
    for s in segments:
        if s.kind == "sink":
            downstream.append([])
            continue
        back = (-s.direction[0], -s.direction[1])
        downstream.append([o.index for o in segments if o.start == s.end and o.direction != back])
    return GridNetwork(rows, cols, segments, terminal, downstream, stride)


def build_default_grid(seed: int = 0) -> GridNetwork:
    """The 84-sensor network: a 2 x 8 grid of intersections."""
    return build_grid(2, 8, seed=seed)


@dataclass
class ClosureSchedule:
    closures: list = field(default_factory=list)  # (segment index, start step, end step)

    def __post_init__(self):
        self.closures = [tuple(int(v) for v in c) for c in self.closures]
        by_seg: dict = {}
        for seg, start, end in self.closures:
            if not start < end:
                raise ValueError(f"closure of segment {seg} has start {start} >= end {end}")
            for s0, e0 in by_seg.get(seg, []):
                if start < e0 and s0 < end:
                    raise ValueError(f"overlapping closures on segment {seg}")
            by_seg.setdefault(seg, []).append((start, end))

    def active(self, t: int) -> frozenset:
        return frozenset(seg for seg, start, end in self.closures if start <= t < end)

    def segments(self) -> list:
        return sorted({seg for seg, _, _ in self.closures})


def central_segment(network: GridNetwork) -> int:
    """An eastbound road in the middle of the top row."""
    if network.cols < 2:
        raise ValueError("closures need a grid with at least 2 columns")
    return network.segment_at(0, max(0, network.cols // 2 - 1), (0, 1))


def closure_adjacent(network: GridNetwork, seg: int) -> list:
    """[upstream, closed, downstream] segments along the closed road's direction."""
    s = network.segments[seg]
    up = [o.index for o in network.segments if o.end == s.start and o.direction == s.direction]
    down = [o.index for o in network.segments if o.start == s.end and o.direction == s.direction]
    return up[:1] + [seg] + down[:1]


def default_schedule(network: GridNetwork, steps: int = 2000, seed: int = 1) -> ClosureSchedule:
    """Central segment closed over [400, 600) and [1500, 1900), plus two random closures.

    Times are given for a 2000-step run and scale proportionally for other lengths.
    """
    f = steps / 2000.0

    def at(t):
        return min(steps, int(round(t * f)))

    centre = central_segment(network)
    closures = [(centre, at(400), at(600)), (centre, at(1500), at(1900))]
    rng = np.random.default_rng(seed)
    internal = [s.index for s in network.segments if s.kind == "internal" and s.index != centre]
    margin = at(100)
    for seg in rng.choice(internal, size=min(2, len(internal)), replace=False):
        length = max(1, at(int(rng.integers(100, 301))))
        start = int(rng.integers(margin, max(margin + 1, steps - length - margin)))
        closures.append((int(seg), start, min(steps, start + length)))
    return ClosureSchedule([c for c in closures if c[2] > c[1]])


def recompute_distances(network: GridNetwork, closed=frozenset()) -> np.ndarray:
    """Sensor-to-sensor shortest travel distance over open segments.

    Distance from sensor i to sensor j is half of i's segment, the shortest
    node path from the end of i's segment to the start of j's, and half of
    j's segment. Sensors on closed segments are unreachable (+inf) from and to
    every other sensor.
    """
    closed = frozenset(closed)
    rows, cols, data = [], [], []
    for s in network.segments:
        if s.index in closed:
            continue
        rows.append(s.start)
        cols.append(s.end)
        data.append(s.length)
    graph = csr_matrix((data, (rows, cols)), shape=(network.n_nodes, network.n_nodes))
    node_dist = shortest_path(graph, method="D", directed=True)
    starts = np.array([s.start for s in network.segments])
    ends = np.array([s.end for s in network.segments])
    half = np.array([s.length for s in network.segments]) / 2.0
    d = half[:, None] + node_dist[ends][:, starts] + half[None, :]
    if closed:
        idx = np.array(sorted(closed))
        d[idx, :] = np.inf
        d[:, idx] = np.inf
    np.fill_diagonal(d, 0.0)
    return d


def dijkstra_distances(network: GridNetwork, closed=frozenset()) -> np.ndarray:
    """Reference sensor distances via heap Dijkstra over the segment graph."""
    n = network.n_sensors
    out_of = {}
    for s in network.segments:
        if s.index not in closed:
            out_of.setdefault(s.start, []).append(s)
    d = np.full((n, n), np.inf)
    for src in network.segments:
        if src.index in closed:
            continue
        best = {src.end: 0.0}
        heap = [(0.0, src.end)]
        while heap:
            dist, node = heapq.heappop(heap)
            if dist > best.get(node, np.inf):
                continue
            for seg in out_of.get(node, []):
                nd = dist + seg.length
                if nd < best.get(seg.end, np.inf):
                    best[seg.end] = nd
                    heapq.heappush(heap, (nd, seg.end))
        for dst in network.segments:
            if dst.index not in closed and dst.start in best:
                d[src.index, dst.index] = src.length / 2 + best[dst.start] + dst.length / 2
        d[src.index, src.index] = 0.0
    for seg in closed:
        d[seg, seg] = 0.0
    return d


def demand_profile(step, stride: int = DEFAULT_STRIDE):
    """Time-of-day demand multiplier with morning and evening peaks."""
    hour = (np.asarray(step) * stride % DAY_SECONDS) / 3600.0
    return (0.25 + 0.35 * ((hour > 6.0) & (hour < 21.0))
            + 1.1 * np.exp(-((hour - 8.0) / 1.1) ** 2) + 0.9 * np.exp(-((hour - 17.5) / 1.4) ** 2))


@dataclass
class SimState:
    pipes: np.ndarray  # (S, tau_max) vehicles by age; all segments exit from the last column
    queues: np.ndarray  # (S,) vehicles waiting at segment ends
    injected: int = 0
    exited: int = 0
    diverted: int = 0  # removed from a segment as it closed; included in exited
    log_demand: np.ndarray | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @property
    def in_flight(self) -> int:
        return int(self.pipes.sum() + self.queues.sum())


def initial_state(network: GridNetwork, seed: int = 1) -> SimState:
    tau_max = max(s.traversal for s in network.segments)
    n = network.n_sensors
    return SimState(np.zeros((n, tau_max), dtype=np.int64), np.zeros(n, dtype=np.int64),
                    log_demand=np.zeros(n), rng=np.random.default_rng(seed))


def _layout(network: GridNetwork):
    tau_max = max(s.traversal for s in network.segments)
    tau = np.array([s.traversal for s in network.segments])
    entry_col = tau_max - tau
    sensor_col = entry_col + (tau - 1) // 2
    return entry_col, sensor_col


def step(state: SimState, network: GridNetwork, schedule: ClosureSchedule, t: int,
         demand_noise: float = 0.06, demand_memory: float = 0.97) -> np.ndarray:
    """Advance one step in place; returns the per-sensor pass counts."""
    entry_col, sensor_col = _layout(network)
    closed = schedule.active(t)
    rng = state.rng
    n = network.n_sensors
    if closed:
        idx = np.fromiter(closed, dtype=np.intp)
        removed = int(state.pipes[idx].sum() + state.queues[idx].sum())
        state.pipes[idx] = 0
        state.queues[idx] = 0
        state.diverted += removed
        state.exited += removed
    counts = state.pipes[np.arange(n), sensor_col].copy()
    state.queues += state.pipes[:, -1]
    state.pipes[:, 1:] = state.pipes[:, :-1]
    state.pipes[:, 0] = 0
    room = np.array([s.capacity for s in network.segments], dtype=np.int64)
    for seg in closed:
        room[seg] = 0
    for s_idx in rng.permutation(n):
        waiting = int(state.queues[s_idx])
        if waiting == 0:
            continue
        seg = network.segments[s_idx]
        movers = min(waiting, seg.capacity)
        if seg.kind == "sink":
            state.queues[s_idx] -= movers
            state.exited += movers
            continue
        options = [o for o in network.downstream[s_idx] if room[o] > 0]
        if not options:
            continue
        split = rng.multinomial(movers, np.full(len(options), 1.0 / len(options)))
        for o, k in zip(options, split):
            k = min(int(k), int(room[o]))
            if k:
                room[o] -= k
                state.pipes[o, entry_col[o]] += k
                state.queues[s_idx] -= k
    if state.log_demand is None:
        state.log_demand = np.zeros(n)
    state.log_demand = demand_memory * state.log_demand + demand_noise * rng.standard_normal(n)
    profile = float(demand_profile(t, network.stride))
    for s_idx in network.sources:
        if s_idx in closed:
            continue
        lam = network.segments[s_idx].base_rate * profile * math.exp(state.log_demand[s_idx])
        k = min(int(rng.poisson(lam)), int(room[s_idx]))
        if k:
            room[s_idx] -= k
            state.pipes[s_idx, entry_col[s_idx]] += k
            state.injected += k
    return counts


@dataclass
class SimDataset:
    x: SensorFeatureTensor
    q: DistanceTensor
    schedule: ClosureSchedule
    network: GridNetwork | None = None
    injected: int = 0
    exited: int = 0
    in_flight: int = 0


def time_of_day(timestamps) -> np.ndarray:
    return (np.asarray(timestamps, dtype=np.int64) % DAY_SECONDS) / DAY_SECONDS


def run(network: GridNetwork, schedule: ClosureSchedule | None = None, steps: int = 2000,
        seed: int = 1, warmup: int = 24) -> SimDataset:
    """Simulate ``steps`` recorded steps (after ``warmup`` unrecorded ones)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    schedule = schedule or ClosureSchedule()
    state = initial_state(network, seed)
    empty = ClosureSchedule()
    for w in range(warmup):
        step(state, network, empty, w - warmup)
    counts = np.zeros((network.n_sensors, steps))
    blocks, block_of, index = [], {}, np.zeros(steps, dtype=np.intp)
    for t in range(steps):
        counts[:, t] = step(state, network, schedule, t)
        closed = schedule.active(t)
        if closed not in block_of:
            block_of[closed] = len(blocks)
            blocks.append(recompute_distances(network, closed))
        index[t] = block_of[closed]
    timestamps = DEFAULT_START + network.stride * np.arange(steps, dtype=np.int64)
    values = np.stack([counts, np.broadcast_to(time_of_day(timestamps), counts.shape)], axis=1)
    x = SensorFeatureTensor(values, network.sensor_ids, timestamps)
    q = DistanceTensor(np.stack(blocks), index, network.sensor_ids)
    return SimDataset(x, q, schedule, network, state.injected, state.exited, state.in_flight)
