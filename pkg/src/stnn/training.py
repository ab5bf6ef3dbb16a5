"""Windowed examples, the L1/Adam training loop, metrics and naive baselines."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .context import (DUMMY, ConnectivityTensor, DistanceTensor, LocalSpacetime, NeighborSet,
                      SensorFeatureTensor, assemble, gaussian_connectivity, select_neighbors)
from .model import STNNModel


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Normalizer:
    """z-score statistics of feature 0."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"normalisation std must be positive, got {self.std}")

    @classmethod
    def fit(cls, x: SensorFeatureTensor, split: range) -> "Normalizer":
        vals = x.values[:, 0, split.start:split.stop]
        return cls(float(vals.mean()), float(vals.std()))

    def normalize(self, v):
        return (np.asarray(v) - self.mean) / self.std

    def denormalize(self, v):
        return np.asarray(v) * self.std + self.mean


@dataclass
class TrainConfig:
    batch_size: int = 80
    epochs: int = 50
    learning_rate: float = 1e-3
    dropout: float = 0.3
    train_subsample_ratio: float = 0.2
    seed: int = 1
    normalization: Normalizer | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.train_subsample_ratio <= 1.0:
            raise ValueError("train_subsample_ratio must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class ExampleSet:
    """Stacked local spacetimes (raw feature scale) and their future targets."""

    inputs: np.ndarray  # (M, alpha, F + 1, T_h)
    targets: np.ndarray  # (M, T_r)
    target_ids: list
    starts: np.ndarray  # window start step per example
    neighbors: np.ndarray  # (M, alpha) sensor-axis rows, -1 for dummy
    sensor_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx) -> "ExampleSet":
        idx = np.asarray(idx)
        return ExampleSet(self.inputs[idx], self.targets[idx], [self.target_ids[i] for i in idx],
                          self.starts[idx], self.neighbors[idx], self.sensor_ids)

    def __iter__(self) -> Iterator[tuple[LocalSpacetime, np.ndarray]]:
        for i in range(len(self)):
            rows = self.neighbors[i]
            members = [self.sensor_ids[r] if r >= 0 else DUMMY for r in rows]
            ns = NeighborSet(self.target_ids[i], members, rows, np.full(len(rows), np.nan))
            yield LocalSpacetime(self.inputs[i], self.target_ids[i], ns), self.targets[i]

    @classmethod
    def concat(cls, sets: Sequence["ExampleSet"]) -> "ExampleSet":
        """Mix examples from several networks; neighbour rows stay per-network."""
        return cls(np.concatenate([s.inputs for s in sets]), np.concatenate([s.targets for s in sets]),
                   [t for s in sets for t in s.target_ids], np.concatenate([s.starts for s in sets]),
                   np.concatenate([s.neighbors for s in sets]), sets[0].sensor_ids if sets else [])

    def history(self) -> np.ndarray:
        """Raw feature-0 history of each target, (M, T_h)."""
        return self.inputs[:, 0, 0, :]


@dataclass
class MetricsReport:
    """MAE / RMSE / MAPE (percent) per horizon step and over all steps."""

    horizons: dict  # step -> {"mae", "rmse", "mape"}
    overall: dict
    n_points: int = 0

    def to_dict(self) -> dict:
        return {"overall": self.overall, "horizons": [{"step": k, **v} for k, v in self.horizons.items()],
                "n_points": self.n_points}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls({int(h["step"]): {k: h[k] for k in ("mae", "rmse", "mape")} for h in d["horizons"]},
                   d["overall"], d.get("n_points", 0))


def chronological_split(T_total: int, T_h: int = 12, T_r: int = 12) -> tuple[range, range, range]:
    """70 / 20 / 10 contiguous split, floor rounding, remainder to test."""
    if T_total < T_h + T_r:
        raise ValueError(f"series of length {T_total} is shorter than T_h + T_r = {T_h + T_r}")
    n_train = int(math.floor(0.7 * T_total))
    n_val = int(math.floor(0.2 * T_total))
    return range(0, n_train), range(n_train, n_train + n_val), range(n_train + n_val, T_total)


def window_starts(split: range, T_h: int = 12, T_r: int = 12) -> np.ndarray:
    """Window starts whose input and target both fall inside ``split``."""
    last = split.stop - T_h - T_r
    if last < split.start:
        return np.zeros(0, dtype=np.int64)
    return np.arange(split.start, last + 1, dtype=np.int64)


def make_examples(x: SensorFeatureTensor, q: DistanceTensor, targets, split: range, *,
                  theta: float, alpha: int = 15, epsilon: float = 0.1, T_h: int = 12, T_r: int = 12,
                  subsample: float = 1.0, seed: int = 1,
                  connectivity: ConnectivityTensor | None = None) -> ExampleSet:
    """One example per (target, window start) inside ``split``.

    ``subsample`` < 1 keeps round(subsample * M) examples drawn uniformly
    without replacement (seeded); pass it for the training split only.
    """
    if targets == "all" or targets is None:
        targets = list(x.sensor_ids)
    ids = list(x.sensor_ids)
    t_idx = [ids.index(t) if t in ids else None for t in targets]
    if None in t_idx:
        raise KeyError(f"unknown target sensor {targets[t_idx.index(None)]!r}")
    starts = window_starts(split, T_h, T_r)
    pairs = [(ti, s) for s in starts for ti in range(len(targets))]
    if subsample < 1.0:
        keep = int(round(subsample * len(pairs)))
        rng = np.random.default_rng(seed)
        pairs = [pairs[i] for i in np.sort(rng.choice(len(pairs), size=keep, replace=False))]
    a_full = connectivity or gaussian_connectivity(q, theta)
    m = len(pairs)
    inputs = np.zeros((m, alpha, x.n_features + 1, T_h))
    out = np.zeros((m, T_r))
    neighbors = np.zeros((m, alpha), dtype=np.intp)
    cache: dict = {}
    for k, (ti, s) in enumerate(pairs):
        a_win = a_full.window(int(s), T_h)
        key = (ti, tuple(np.unique(a_win.block_index)))
        ns = cache.get(key)
        if ns is None:
            ns = cache[key] = select_neighbors(a_win, targets[ti], epsilon, alpha, ids, q.window(int(s), T_h))
        inputs[k] = assemble(x.values[:, :, s:s + T_h], a_win, ns)
        out[k] = x.values[t_idx[ti], 0, s + T_h:s + T_h + T_r]
        neighbors[k] = ns.indices
    return ExampleSet(inputs, out, [targets[ti] for ti, _ in pairs],
                      np.array([s for _, s in pairs], dtype=np.int64), neighbors, ids)


def prepare_inputs(examples: ExampleSet, norm: Normalizer, idx=None) -> np.ndarray:
    """z-score feature 0 of real rows; dummy rows stay all-zero."""
    inputs = examples.inputs if idx is None else examples.inputs[idx]
    real = (examples.neighbors if idx is None else examples.neighbors[idx]) >= 0
    out = inputs.copy()
    out[:, :, 0, :] = np.where(real[:, :, None], norm.normalize(inputs[:, :, 0, :]), 0.0)
    return out


def predict(model: STNNModel, examples: ExampleSet, norm: Normalizer, batch_size: int = 256) -> np.ndarray:
    """De-normalised forecasts, (M, T_r)."""
    return norm.denormalize(model.predict(prepare_inputs(examples, norm), batch_size))


def _snapshot(model):
    return [p.data.copy() for p in model.parameters()]


def _restore(model, snap):
    for p, v in zip(model.parameters(), snap):
        p.data[...] = v


def train(model: STNNModel, examples: ExampleSet, config: TrainConfig, val: ExampleSet | None = None,
          log_path: str | Path | None = None, on_epoch: Callable | None = None) -> list[dict]:
    """Mini-batch Adam on the L1 loss between normalised forecasts and targets.

    When ``val`` is given the parameters with the best validation MAE are
    restored at the end. Returns the per-epoch log.
    """
    if len(examples) == 0:
        raise ValueError("no training examples")
    norm = config.normalization
    if norm is None:
        raise ValueError("TrainConfig.normalization must be set")
    model.config.dropout_rate = config.dropout
    params = model.parameters()
    state = ad.AdamState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    x_all = prepare_inputs(examples, norm)
    y_all = norm.normalize(examples.targets)
    log, best, best_mae = [], None, math.inf
    t0 = time.time()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            pred = model.forward(x_all[idx], training=True)
            loss = ad.tabs(pred - y_all[idx].astype(pred.dtype)).mean()
            value = float(loss.data)
            if not math.isfinite(value):
                ad.current_tape().clear()
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {i // config.batch_size}; "
                    f"check the learning rate ({config.learning_rate}) and the input data")
            loss.backward()
            ad.adam_step(params, state)
            total += value * len(idx)
            count += len(idx)
        entry = {"epoch": epoch, "train_loss": total / count, "val_mae": None,
                 "wall_time": round(time.time() - t0, 3)}
        if val is not None and len(val):
            mae = evaluate(model, val, norm).overall["mae"]
            entry["val_mae"] = mae
            if mae < best_mae:
                best_mae, best = mae, _snapshot(model)
        log.append(entry)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if on_epoch is not None:
            on_epoch(entry)
    if best is not None:
        _restore(model, best)
    return log


def compute_metrics(pred, truth, exclude_zero: bool = False) -> dict:
    """MAE, RMSE and MAPE (percent, nonzero truth only)."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if exclude_zero:
        keep = truth != 0
        pred, truth = pred[keep], truth[keep]
    if truth.size == 0:
        return {"mae": math.nan, "rmse": math.nan, "mape": math.nan}
    err = pred - truth
    nz = truth != 0
    with np.errstate(over="ignore"):
        mape = float(np.mean(np.abs(err[nz] / truth[nz])) * 100.0) if nz.any() else math.nan
    scale = float(np.max(np.abs(err)))
    # scaled so that tiny or huge residuals neither underflow nor overflow when squared
    rmse = scale * float(np.sqrt(np.mean((err / scale) ** 2))) if scale > 0 else 0.0
    return {"mae": float(np.mean(np.abs(err))), "rmse": rmse, "mape": mape}


def metrics_report(pred: np.ndarray, truth: np.ndarray, horizons: Sequence[int] = (3, 6, 12),
                   exclude_zero: bool = False) -> MetricsReport:
    pred, truth = np.atleast_2d(pred), np.atleast_2d(truth)
    per = {h: compute_metrics(pred[:, h - 1], truth[:, h - 1], exclude_zero)
           for h in horizons if h <= truth.shape[1]}
    n = int((truth != 0).sum()) if exclude_zero else truth.size
    return MetricsReport(per, compute_metrics(pred, truth, exclude_zero), n)


def evaluate(model: STNNModel, examples: ExampleSet, norm: Normalizer, horizons: Sequence[int] = (3, 6, 12),
             exclude_zero: bool = False) -> MetricsReport:
    return metrics_report(predict(model, examples, norm), examples.targets, horizons, exclude_zero)


def mean_over_seeds(run: Callable[[int], MetricsReport], seeds: Sequence[int] = (1, 2, 3, 4, 5)) -> MetricsReport:
    """Average the reports of ``run(seed)`` over several seeds (metric-wise mean)."""
    reports = [run(s) for s in seeds]
    if not reports:
        raise ValueError("need at least one seed")

    def avg(dicts):
        return {k: float(np.mean([d[k] for d in dicts])) for k in ("mae", "rmse", "mape")}

    steps = reports[0].horizons.keys()
    return MetricsReport({h: avg([r.horizons[h] for r in reports]) for h in steps},
                         avg([r.overall for r in reports]), reports[0].n_points)


def baseline_ha(series, window: int = 12, horizon: int = 12) -> np.ndarray:
    """Moving average of the last ``window`` values, repeated over the horizon."""
    series = np.asarray(series, dtype=np.float64)
    if series.shape[-1] < window:
        raise ValueError(f"series of length {series.shape[-1]} is shorter than the window {window}")
    mean = series[..., -window:].mean(axis=-1, keepdims=True)
    return np.repeat(mean, horizon, axis=-1)


def baseline_persistence(series, horizon: int = 12) -> np.ndarray:
    series = np.asarray(series, dtype=np.float64)
    if series.shape[-1] == 0:
        raise ValueError("empty series")
    return np.repeat(series[..., -1:], horizon, axis=-1)


def evaluate_baseline(kind: str, examples: ExampleSet, horizons: Sequence[int] = (3, 6, 12),
                      exclude_zero: bool = False) -> MetricsReport:
    hist = examples.history()
    horizon = examples.targets.shape[1]
    if kind == "ha":
        pred = baseline_ha(hist, min(12, hist.shape[1]), horizon)
    elif kind == "persistence":
        pred = baseline_persistence(hist, horizon)
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return metrics_report(pred, examples.targets, horizons, exclude_zero)
