"""Dataset files, manifests and model checkpoints.

Dataset layout (all paths in a manifest are relative to the manifest):

* speed table: CSV, header ``timestamp,<id>,...``, one row per step with an
  ISO-8601 UTC timestamp followed by one value per sensor.
* distance file, static: CSV with header ``,<id>,...`` and one ``<id>,...``
  row per sensor. Dynamic: a sequence of such blocks, each preceded by a
  line ``@step <k>`` giving the first step it applies to. ``inf`` marks
  unreachable pairs.

Floats are written with ``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .context import DistanceTensor, SensorFeatureTensor
from .model import ModelConfig, STNNModel
from .sim import time_of_day
from .training import Normalizer

MANIFEST_VERSION = 1
CHECKPOINT_VERSION = 1


class DatasetParseError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class DatasetManifest:
    name: str
    speed_table: str
    distance_file: str
    distance_mode: str = "static"
    stride_seconds: int = 300
    features: list = field(default_factory=lambda: ["speed", "time_of_day"])
    units: dict = field(default_factory=dict)
    closures: list = field(default_factory=list)  # [sensor id, start, end]
    root: Path = Path(".")

    @property
    def marks_closures(self) -> bool:
        return bool(self.closures)

    def path(self, which: str) -> Path:
        return self.root / getattr(self, which)

    def to_dict(self) -> dict:
        return {"format_version": MANIFEST_VERSION, "name": self.name, "speed_table": self.speed_table,
                "distance_file": self.distance_file, "distance_mode": self.distance_mode,
                "stride_seconds": self.stride_seconds, "features": self.features, "units": self.units,
                "closures": self.closures}


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    for key in ("name", "speed_table", "distance_file"):
        if key not in raw:
            raise ManifestError(f"{path}: missing field '{key}'")
    man = DatasetManifest(raw["name"], raw["speed_table"], raw["distance_file"],
                          raw.get("distance_mode", "static"), int(raw.get("stride_seconds", 300)),
                          raw.get("features", ["speed", "time_of_day"]), raw.get("units", {}),
                          [list(c) for c in raw.get("closures", [])], path.parent)
    if man.distance_mode not in ("static", "dynamic"):
        raise ManifestError(f"{path}: distance_mode must be 'static' or 'dynamic'")
    for key in ("speed_table", "distance_file"):
        if not man.path(key).is_file():
            raise ManifestError(f"{path}: field '{key}' points to missing file {man.path(key)}")
    return man


def write_manifest(man: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(man.to_dict(), indent=2) + "\n")


def _parse_time(text: str, where: str) -> int:
    try:
        dt = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    except ValueError:
        raise DatasetParseError(f"{where}: bad timestamp {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def _format_time(epoch: int) -> str:
    return datetime.fromtimestamp(int(epoch), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetParseError(f"{where}: not a number {text!r}") from None


def write_speed_table(path, values: np.ndarray, sensor_ids, timestamps) -> None:
    """``values`` is (N, T)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *sensor_ids])
        for t, ts in enumerate(timestamps):
            w.writerow([_format_time(ts), *(repr(float(v)) for v in values[:, t])])


def read_speed_table(path, stride: int | None = None):
    """Returns (values (N, T), sensor ids, timestamps)."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["timestamp"]:
        raise DatasetParseError(f"{path}:1: header must start with 'timestamp'")
    ids = rows[0][1:]
    if len(set(ids)) != len(ids):
        raise DatasetParseError(f"{path}:1: duplicate sensor ids")
    stamps, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if len(row) != len(ids) + 1:
            raise DatasetParseError(f"{where}: expected {len(ids) + 1} fields, got {len(row)}")
        ts = _parse_time(row[0], where)
        if stamps and ts <= stamps[-1]:
            raise DatasetParseError(f"{where}: timestamps must be strictly increasing")
        if stride is not None and stamps and ts - stamps[-1] != stride:
            raise DatasetParseError(f"{where}: step of {ts - stamps[-1]} s, declared stride {stride} s")
        stamps.append(ts)
        data.append([_float(v, where) for v in row[1:]])
    return np.array(data, dtype=np.float64).T.reshape(len(ids), len(stamps)), ids, np.array(stamps, dtype=np.int64)


def _write_matrix(w, matrix, ids):
    w.writerow(["", *ids])
    for sid, row in zip(ids, matrix):
        w.writerow([sid, *(repr(float(v)) for v in row)])


def write_distances(path, q: DistanceTensor) -> None:
    """Static file when there is a single block, dynamic block file otherwise."""
    ids = list(q.sensor_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if q.blocks.shape[0] == 1:
            _write_matrix(w, q.blocks[0], ids)
            return
        prev = None
        for t, b in enumerate(q.block_index):
            if b != prev:
                fh.write(f"@step {t}\n")
                _write_matrix(w, q.blocks[b], ids)
                prev = b


def _parse_matrix(lines, ids_expected, where_start, path):
    header = lines[0]
    ids = header[1:]
    if header[:1] != [""]:
        raise DatasetParseError(f"{path}:{where_start}: matrix header must start with an empty cell")
    if ids_expected is not None and ids != ids_expected:
        raise DatasetParseError(f"{path}:{where_start}: sensor ids do not match the speed table")
    if len(lines) - 1 != len(ids):
        raise DatasetParseError(f"{path}:{where_start}: expected {len(ids)} matrix rows, got {len(lines) - 1}")
    mat = np.zeros((len(ids), len(ids)))
    for k, row in enumerate(lines[1:]):
        where = f"{path}:{where_start + k + 1}"
        if len(row) != len(ids) + 1 or row[0] != ids[k]:
            raise DatasetParseError(f"{where}: malformed matrix row")
        mat[k] = [_float(v, where) for v in row[1:]]
    if (mat < 0).any() or (np.diag(mat) != 0).any():
        raise DatasetParseError(f"{path}:{where_start}: distances must be nonnegative with a zero diagonal")
    return mat, ids


def read_distances(path, n_steps: int, sensor_ids=None, mode: str = "static") -> DistanceTensor:
    path = Path(path)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if mode == "static":
        rows = list(csv.reader(lines))
        mat, ids = _parse_matrix(rows, sensor_ids, 1, path)
        return DistanceTensor.static(mat, n_steps, ids)
    starts, blocks, ids = [], [], None
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.startswith("@step"):
            raise DatasetParseError(f"{path}:{i + 1}: expected '@step <k>'")
        try:
            step = int(line.split()[1])
        except (IndexError, ValueError):
            raise DatasetParseError(f"{path}:{i + 1}: bad block header {line!r}") from None
        if starts and step <= starts[-1]:
            raise DatasetParseError(f"{path}:{i + 1}: blocks must be ordered by step")
        j = i + 1
        while j < len(lines) and not lines[j].startswith("@step"):
            j += 1
        mat, ids = _parse_matrix(list(csv.reader(lines[i + 1:j])), sensor_ids, i + 2, path)
        starts.append(step)
        blocks.append(mat)
        i = j
    if not starts or starts[0] != 0:
        raise DatasetParseError(f"{path}:1: the first block must start at step 0")
    index = np.searchsorted(np.array(starts), np.arange(n_steps), side="right") - 1
    return DistanceTensor(np.stack(blocks), index, ids)


def load_dataset(manifest) -> tuple[SensorFeatureTensor, DistanceTensor]:
    """Parse a dataset; feature 1 is the time of day derived from the timestamps."""
    man = manifest if isinstance(manifest, DatasetManifest) else read_manifest(manifest)
    values, ids, stamps = read_speed_table(man.path("speed_table"), man.stride_seconds)
    x = SensorFeatureTensor(np.stack([values, np.broadcast_to(time_of_day(stamps), values.shape)], axis=1),
                            ids, stamps)
    q = read_distances(man.path("distance_file"), len(stamps), ids, man.distance_mode)
    return x, q


def save_dataset(out_dir, name: str, x: SensorFeatureTensor, q: DistanceTensor, closures=(),
                 stride: int | None = None, features=("volume", "time_of_day"), units=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_speed_table(out / "series.csv", x.values[:, 0, :], x.sensor_ids, x.timestamps)
    write_distances(out / "distances.txt", q)
    if stride is None:
        stride = int(x.timestamps[1] - x.timestamps[0]) if x.n_steps > 1 else 300
    man = DatasetManifest(name, "series.csv", "distances.txt",
                          "static" if q.blocks.shape[0] == 1 else "dynamic", stride, list(features),
                          units or {"distance": "m"}, [list(c) for c in closures], out)
    write_manifest(man, out / "manifest.json")
    return out / "manifest.json"


def adapt_edge_list_distances(path, sensor_ids) -> np.ndarray:
    """Directed distance matrix from a ``from,to,cost`` CSV (the public METR-LA /
    PeMS-Bay export); pairs absent from the list are unreachable."""
    ids = [str(s) for s in sensor_ids]
    pos = {s: i for i, s in enumerate(ids)}
    mat = np.full((len(ids), len(ids)), np.inf)
    np.fill_diagonal(mat, 0.0)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["from", "to", "cost"]:
            raise DatasetParseError(f"{path}:1: expected header from,to,cost")
        for lineno, row in enumerate(reader, start=2):
            if len(row) < 3:
                raise DatasetParseError(f"{path}:{lineno}: expected 3 fields")
            a, b = row[0].strip(), row[1].strip()
            if a in pos and b in pos and a != b:
                mat[pos[a], pos[b]] = _float(row[2], f"{path}:{lineno}")
    return mat


def adapt_wide_table(path, out_path, stride: int = 300) -> list:
    """Rewrite a wide CSV export (first column time, then one column per sensor)
    as a speed table, forward-filling blanks. Returns the sensor ids."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    ids = [c.strip() for c in rows[0][1:]]
    stamps, data, last = [], [], None
    for lineno, row in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if len(row) != len(ids) + 1:
            raise DatasetParseError(f"{where}: expected {len(ids) + 1} fields, got {len(row)}")
        vals = [np.nan if v.strip() in ("", "nan", "NaN") else _float(v, where) for v in row[1:]]
        vals = np.array(vals)
        if last is not None:
            vals = np.where(np.isnan(vals), last, vals)
        last = vals
        stamps.append(_parse_time(row[0], where))
        data.append(np.nan_to_num(vals))
    write_speed_table(out_path, np.array(data).T, ids, stamps)
    return ids


# ---------------------------------------------------------------- checkpoints

def _checksum(names, arrays) -> str:
    h = hashlib.sha256()
    for name, arr in zip(names, arrays):
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: STNNModel, normalizer: Normalizer | None = None,
                    theta: float | None = None, epsilon: float | None = None, extra: dict | None = None) -> None:
    params = model.named_parameters()
    names = list(params)
    arrays = [params[n].data for n in names]
    meta = {"format_version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "names": names,
            "shapes": [list(a.shape) for a in arrays], "checksum": _checksum(names, arrays),
            "normalizer": None if normalizer is None else {"mean": normalizer.mean, "std": normalizer.std},
            "theta": theta, "epsilon": epsilon, "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **{f"p{i}": a for i, a in enumerate(arrays)})


def load_checkpoint(path) -> tuple[STNNModel, dict]:
    """Returns the model and the metadata dict (with a ``Normalizer`` under 'normalizer')."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = [z[f"p{i}"] for i in range(len(meta.get("names", [])))]
    except (OSError, ValueError, KeyError, EOFError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
    if _checksum(meta["names"], arrays) != meta["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    model = STNNModel(ModelConfig.from_dict(meta["config"]))
    params = model.named_parameters()
    if list(params) != meta["names"]:
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    for name, arr in zip(meta["names"], arrays):
        if params[name].shape != arr.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, "
                                  f"config implies {params[name].shape}")
        params[name].data[...] = arr
    if meta.get("normalizer"):
        meta["normalizer"] = Normalizer(**meta["normalizer"])
    return model, meta
