"""Local-spacetime construction around target sensors.

Distances are stored piecewise-constant in time: a stack of K distinct
N x N matrices plus a per-step block index. Static networks have K = 1,
and road closures add a block each time the open-road set changes. The
full N x N x T view is only materialised on request.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

DUMMY = None  # neighbour-list marker for padding rows


class DegenerateBandwidthError(ValueError):
    pass


class SensorLookupError(KeyError):
    pass


@dataclass
class SensorFeatureTensor:
    """Observations, shape (N, F, T). Feature 0 is the traffic measure."""

    values: np.ndarray
    sensor_ids: list
    timestamps: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n, f, t = self.values.shape
        if f < 1:
            raise ValueError("need at least one feature")
        if len(self.sensor_ids) != n or len(self.timestamps) != t:
            raise ValueError("sensor_ids / timestamps do not match the value shape")
        if t > 1:
            stride = np.diff(self.timestamps)
            if (stride <= 0).any() or (stride != stride[0]).any():
                raise ValueError("timestamps must be strictly increasing with a constant stride")
        if np.isnan(self.values).any():
            raise ValueError("feature tensor contains NaN")

    @property
    def n_sensors(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def n_steps(self) -> int:
        return self.values.shape[2]

    def window(self, start: int, length: int) -> "SensorFeatureTensor":
        return SensorFeatureTensor(self.values[:, :, start:start + length], self.sensor_ids,
                                   self.timestamps[start:start + length])


@dataclass
class DistanceTensor:
    """Time-indexed travel distances Q(t) in metres; +inf marks unreachable."""

    blocks: np.ndarray  # (K, N, N)
    block_index: np.ndarray  # (T,) block id per step
    sensor_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.float64)
        if self.blocks.ndim == 2:
            self.blocks = self.blocks[None]
        self.block_index = np.asarray(self.block_index, dtype=np.intp)
        k, n, m = self.blocks.shape
        if n != m:
            raise ValueError(f"distance matrices must be square, got {n}x{m}")
        if np.isnan(self.blocks).any() or (self.blocks < 0).any():
            raise ValueError("distances must be nonnegative")
        if (np.diagonal(self.blocks, axis1=1, axis2=2) != 0).any():
            raise ValueError("distance diagonal must be zero")
        if self.block_index.size and (self.block_index.min() < 0 or self.block_index.max() >= k):
            raise ValueError("block index out of range")
        if not self.sensor_ids:
            self.sensor_ids = list(range(n))

    @classmethod
    def static(cls, matrix, n_steps: int, sensor_ids=None) -> "DistanceTensor":
        return cls(np.asarray(matrix)[None], np.zeros(n_steps, dtype=np.intp), list(sensor_ids or []))

    @classmethod
    def from_dense(cls, values, sensor_ids=None) -> "DistanceTensor":
        """Build from an (N, N, T) array, merging runs of identical matrices."""
        values = np.asarray(values, dtype=np.float64)
        blocks, index = [], []
        for t in range(values.shape[2]):
            q = values[:, :, t]
            if not blocks or not np.array_equal(blocks[-1], q):
                blocks.append(q)
            index.append(len(blocks) - 1)
        return cls(np.stack(blocks), np.array(index), list(sensor_ids or []))

    @property
    def n_sensors(self) -> int:
        return self.blocks.shape[1]

    @property
    def n_steps(self) -> int:
        return self.block_index.size

    @property
    def values(self) -> np.ndarray:
        """(N, N, T) view; a broadcast view, not a copy, for static networks."""
        if self.blocks.shape[0] == 1:
            return np.broadcast_to(self.blocks[0][:, :, None], (self.n_sensors, self.n_sensors, self.n_steps))
        return self.blocks[self.block_index].transpose(1, 2, 0)

    def at(self, t: int) -> np.ndarray:
        return self.blocks[self.block_index[t]]

    def window(self, start: int, length: int) -> "DistanceTensor":
        return DistanceTensor(self.blocks, self.block_index[start:start + length], self.sensor_ids)


@dataclass
class ConnectivityTensor:
    """Gaussian-kernel connectivity, same block layout as the distances."""

    blocks: np.ndarray
    block_index: np.ndarray
    theta: float

    @property
    def values(self) -> np.ndarray:
        return self.blocks[self.block_index].transpose(1, 2, 0)

    @property
    def n_sensors(self) -> int:
        return self.blocks.shape[1]

    def window(self, start: int, length: int) -> "ConnectivityTensor":
        return ConnectivityTensor(self.blocks, self.block_index[start:start + length], self.theta)


@dataclass
class NeighborSet:
    target_id: Hashable
    members: list  # sensor ids, DUMMY for padding
    indices: np.ndarray  # row into the sensor axis, -1 for padding
    distances: np.ndarray  # min-over-time distance to the target, inf for padding

    @property
    def alpha(self) -> int:
        return len(self.members)


@dataclass
class LocalSpacetime:
    tensor: np.ndarray  # (alpha, F + 1, T)
    target_id: Hashable
    neighbor_set: NeighborSet


def estimate_theta(q: DistanceTensor) -> float:
    """Population standard deviation of all finite distance entries.

    Uses a streaming (Welford-merge) pass over the distinct blocks weighted
    by how many steps each block covers.
    """
    counts = np.bincount(q.block_index, minlength=q.blocks.shape[0])
    n_tot, mean, m2 = 0, 0.0, 0.0
    for block, reps in zip(q.blocks, counts):
        if reps == 0:
            continue
        vals = block[np.isfinite(block)]
        if vals.size == 0:
            continue
        nb = vals.size * int(reps)
        mb = float(vals.mean())
        m2b = float(((vals - mb) ** 2).sum()) * int(reps)
        delta = mb - mean
        tot = n_tot + nb
        mean += delta * nb / tot
        m2 += m2b + delta * delta * n_tot * nb / tot
        n_tot = tot
    if n_tot < 2:
        raise DegenerateBandwidthError("need at least two finite distances")
    theta = float(np.sqrt(m2 / n_tot))
    if not theta > 0.0:
        raise DegenerateBandwidthError("all finite distances are equal; bandwidth would be zero")
    return theta


def gaussian_connectivity(q: DistanceTensor, theta: float) -> ConnectivityTensor:
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp(-(q.blocks / theta) ** 2)
    a[np.isinf(q.blocks)] = 0.0
    idx = np.arange(q.n_sensors)
    a[:, idx, idx] = 1.0
    return ConnectivityTensor(a, q.block_index, float(theta))


def _target_index(sensor_ids: Sequence, target) -> int:
    try:
        return list(sensor_ids).index(target)
    except ValueError:
        raise SensorLookupError(f"unknown target sensor {target!r}") from None


def _sort_key(sid):
    return (0, sid, "") if isinstance(sid, (int, np.integer)) else (1, 0, str(sid))


def select_neighbors(a: ConnectivityTensor, target, epsilon: float, alpha: int,
                     sensor_ids: Sequence | None = None,
                     q: DistanceTensor | None = None) -> NeighborSet:
    """Sensors whose connectivity to or from the target exceeds epsilon at some step.

    Members are ordered by the minimum-over-time travel distance to the
    target (ties by sensor id), truncated to ``alpha`` or padded with dummy
    entries. When ``q`` is not given the ordering distance is recovered
    from the connectivity values by inverting the kernel.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    ids = list(sensor_ids) if sensor_ids is not None else list(range(a.n_sensors))
    p = _target_index(ids, target)
    used = np.unique(a.block_index)
    into = a.blocks[used, :, p]  # A(i, p) per block
    out_of = a.blocks[used, p, :]  # A(p, i)
    reach = np.maximum(into, out_of).max(axis=0) > epsilon
    reach[p] = True
    cand = np.flatnonzero(reach)
    if q is not None:
        dist = q.blocks[used[:, None], cand[None, :], p].min(axis=0)
    else:
        with np.errstate(divide="ignore"):
            dist = a.theta * np.sqrt(-np.log(into[:, cand].max(axis=0)))
    dist[cand == p] = 0.0
    order = sorted(range(cand.size), key=lambda j: (cand[j] != p, dist[j], _sort_key(ids[cand[j]])))
    order = order[:alpha]
    members = [ids[cand[j]] for j in order]
    indices = [int(cand[j]) for j in order]
    dists = [float(dist[j]) for j in order]
    pad = alpha - len(members)
    members += [DUMMY] * pad
    indices += [-1] * pad
    dists += [np.inf] * pad
    return NeighborSet(target, members, np.array(indices, dtype=np.intp), np.array(dists))


def build_snapshot(x: SensorFeatureTensor, a: ConnectivityTensor, ns: NeighborSet, t: int) -> np.ndarray:
    """One (alpha, F + 1) slice: features of each member plus its connectivity to the target."""
    p = ns.indices[0]
    out = np.zeros((ns.alpha, x.n_features + 1))
    real = ns.indices >= 0
    rows = ns.indices[real]
    out[real, :-1] = x.values[rows, :, t]
    out[real, -1] = a.blocks[a.block_index[t]][rows, p]
    return out


def assemble(x_values: np.ndarray, a: ConnectivityTensor, ns: NeighborSet) -> np.ndarray:
    """Stack all snapshots into the (alpha, F + 1, T) tensor in one vectorised pass."""
    _, f, t = x_values.shape
    out = np.zeros((ns.alpha, f + 1, t))
    real = ns.indices >= 0
    rows = ns.indices[real]
    p = ns.indices[0]
    out[real, :f, :] = x_values[rows]
    # index only the needed column so the cost stays O(N T), not O(N^2 T)
    out[real, f, :] = a.blocks[a.block_index[:, None], rows[None, :], p].T
    return out


def build_local_spacetime(x: SensorFeatureTensor, q: DistanceTensor, target, epsilon: float = 0.1,
                          alpha: int = 15, theta: float | None = None,
                          connectivity: ConnectivityTensor | None = None) -> LocalSpacetime:
    """Local-spacetime of ``target`` over the whole time span of ``x``.

    ``connectivity`` may be passed in precomputed (it must cover the same
    steps as ``x``) to avoid recomputing the kernel per target.
    """
    if q.n_steps != x.n_steps:
        raise ValueError(f"feature tensor has {x.n_steps} steps, distances {q.n_steps}")
    if list(q.sensor_ids) != list(x.sensor_ids) and list(q.sensor_ids) != list(range(q.n_sensors)):
        raise ValueError("distance and feature tensors list different sensors")
    if connectivity is None:
        if theta is None:
            theta = estimate_theta(q)
        connectivity = gaussian_connectivity(q, theta)
    ns = select_neighbors(connectivity, target, epsilon, alpha, x.sensor_ids, q)
    return LocalSpacetime(assemble(x.values, connectivity, ns), target, ns)
