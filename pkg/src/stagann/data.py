"""Datasets, sensor/time splits, windowing, synthetic data and checkpoints.

File formats
------------
series CSV
    header ``timestamp,<sensor id>,...``; first column ISO-8601, one row per step.
adjacency CSV
    header ``src,dst,weight``; sensor ids as in the series header.
metadata CSV
    header ``sensor_id,lat,lon``.
checkpoint
    ``b"STKG"``, u32 version, u32 entry count, then per entry: u32 name
    length, UTF-8 name, u32 rank, rank x u64 dims, little-endian float64
    values.  Everything little-endian.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import Adjacency, row_normalize
from .model import KrigeBatch


class DataError(ValueError):
    """Malformed or inconsistent input files."""


class CheckpointError(ValueError):
    pass


@dataclass
class Dataset:
    series: np.ndarray  # (N, T)
    sensor_ids: list[str]
    adjacency: np.ndarray  # (N, N) raw edge weights
    coords: np.ndarray | None = None  # (N, 2) lat, lon
    step_minutes: int = 5
    start: np.datetime64 = field(default_factory=lambda: np.datetime64("2024-01-01T00:00", "m"))

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        self.start = np.datetime64(self.start, "m")
        n = self.series.shape[0]
        if self.adjacency.shape != (n, n):
            raise DataError(f"adjacency {self.adjacency.shape} does not match {n} sensors")
        if len(self.sensor_ids) != n:
            raise DataError(f"{len(self.sensor_ids)} sensor ids for {n} series")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if self.coords.shape != (n, 2):
                raise DataError(f"coordinates {self.coords.shape} do not match {n} sensors")
        if np.isnan(self.series).any():
            self.series = fill_missing(self.series)

    @property
    def n_sensors(self) -> int:
        return self.series.shape[0]

    @property
    def n_steps(self) -> int:
        return self.series.shape[1]

    def timestamps(self, idx=None) -> np.ndarray:
        idx = np.arange(self.n_steps) if idx is None else np.asarray(idx)
        return self.start + idx * np.timedelta64(self.step_minutes, "m")


def fill_missing(series: np.ndarray) -> np.ndarray:
    """Forward-fill along time, then zero whatever is still missing."""
    x = np.array(series, dtype=np.float64)
    for row in x:
        nan = np.isnan(row)
        if not nan.any():
            continue
        idx = np.where(~nan, np.arange(row.size), 0)
        np.maximum.accumulate(idx, out=idx)
        filled = row[idx]
        filled[np.isnan(filled)] = 0.0
        row[:] = filled
    return x


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def save_dataset(ds: Dataset, directory) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"series": d / "series.csv", "adjacency": d / "adjacency.csv"}
    with open(paths["series"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *ds.sensor_ids])
        for t, ts in enumerate(ds.timestamps()):
            w.writerow([str(ts), *(_fmt(v) for v in ds.series[:, t])])
    with open(paths["adjacency"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst", "weight"])
        for i, j in zip(*np.nonzero(ds.adjacency)):
            w.writerow([ds.sensor_ids[i], ds.sensor_ids[j], _fmt(ds.adjacency[i, j])])
    if ds.coords is not None:
        paths["metadata"] = d / "metadata.csv"
        with open(paths["metadata"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sensor_id", "lat", "lon"])
            for sid, (lat, lon) in zip(ds.sensor_ids, ds.coords):
                w.writerow([sid, _fmt(lat), _fmt(lon)])
    return paths


def _float(text: str, path, line: int) -> float:
    if text.strip() == "" or text.strip().lower() == "nan":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse number {text!r}") from None


def load_dataset(series_path, adjacency_path, metadata_path=None) -> Dataset:
    """Read the three CSV files; a missing metadata path means no coordinates."""
    series_path = Path(series_path)
    with open(series_path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2:
        raise DataError(f"{series_path}: header must be timestamp plus at least one sensor")
    ids = rows[0][1:]
    if len(set(ids)) != len(ids):
        raise DataError(f"{series_path}: duplicate sensor ids in header")
    stamps, values = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(ids) + 1:
            raise DataError(f"{series_path}:{line}: expected {len(ids) + 1} columns, got {len(row)}")
        try:
            stamps.append(np.datetime64(row[0], "m"))
        except ValueError:
            raise DataError(f"{series_path}:{line}: bad timestamp {row[0]!r}") from None
        values.append([_float(v, series_path, line) for v in row[1:]])
    if len(stamps) < 2:
        raise DataError(f"{series_path}: need at least two time steps")
    stamps = np.array(stamps)
    steps = np.diff(stamps).astype(np.int64)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 3
        raise DataError(f"{series_path}:{bad}: timestamps are not strictly increasing")
    if np.any(steps != steps[0]):
        bad = int(np.argmax(steps != steps[0])) + 3
        raise DataError(f"{series_path}:{bad}: irregular time step")
    series = np.array(values).T
    index = {sid: i for i, sid in enumerate(ids)}

    adj = np.zeros((len(ids), len(ids)))
    adjacency_path = Path(adjacency_path)
    with open(adjacency_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["src", "dst", "weight"]:
            raise DataError(f"{adjacency_path}:1: header must be src,dst,weight")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{adjacency_path}:{line}: expected 3 columns")
            for sid in row[:2]:
                if sid not in index:
                    raise DataError(f"{adjacency_path}:{line}: unknown sensor id {sid!r}")
            w = _float(row[2], adjacency_path, line)
            if not np.isfinite(w) or w < 0:
                raise DataError(f"{adjacency_path}:{line}: weight must be finite and >= 0")
            adj[index[row[0]], index[row[1]]] = w

    coords = None
    if metadata_path is not None and Path(metadata_path).exists():
        metadata_path = Path(metadata_path)
        coords = np.full((len(ids), 2), np.nan)
        with open(metadata_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["sensor_id", "lat", "lon"]:
                raise DataError(f"{metadata_path}:1: header must be sensor_id,lat,lon")
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise DataError(f"{metadata_path}:{line}: expected 3 columns")
                if row[0] not in index:
                    raise DataError(f"{metadata_path}:{line}: unknown sensor id {row[0]!r}")
                coords[index[row[0]]] = [_float(row[1], metadata_path, line), _float(row[2], metadata_path, line)]
        if np.isnan(coords).any():
            missing = [ids[i] for i in np.where(np.isnan(coords).any(axis=1))[0]]
            raise DataError(f"{metadata_path}: no coordinates for sensors {missing}")
    return Dataset(series, ids, adj, coords, int(steps[0]), stamps[0])


def load_dataset_dir(directory) -> Dataset:
    d = Path(directory)
    return load_dataset(d / "series.csv", d / "adjacency.csv", d / "metadata.csv")


# ---------------------------------------------------------------------------
# splits and windows
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    known: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    time_boundary: int

    def unknown(self) -> np.ndarray:
        return np.sort(np.concatenate([self.validation, self.test]))

    def to_dict(self) -> dict:
        return {"known": self.known.tolist(), "validation": self.validation.tolist(),
                "test": self.test.tolist(), "time_boundary": int(self.time_boundary)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(np.array(d["known"], dtype=np.int64), np.array(d["validation"], dtype=np.int64),
                   np.array(d["test"], dtype=np.int64), int(d["time_boundary"]))


def make_split(dataset: Dataset, seed: int = 0, ratio: tuple[int, int, int] = (7, 1, 2),
               time_fraction: float = 0.7) -> SplitPlan:
    """Seeded sensor split ``known:validation:test`` plus the train/eval time cut.

    Validation and test sizes are floored; the remainder goes to the known set.
    The test set is drawn first so it does not depend on the known/validation
    proportions of a missing-rate sweep.
    """
    n = dataset.n_sensors
    if sum(ratio) != 10 or min(ratio) < 0:
        raise ValueError(f"ratio must be three non-negative integers summing to 10, got {ratio}")
    n_val = ratio[1] * n // 10
    n_test = ratio[2] * n // 10
    n_known = n - n_val - n_test
    if n_known < 1 or ratio[0] * n < 10:
        raise ValueError(f"split {ratio} leaves fewer than one known sensor out of {n}")
    perm = np.random.default_rng(seed).permutation(n)
    test = np.sort(perm[:n_test])
    # validation drawn from the tail so that the known set shrinks from the front
    rest = perm[n_test:]
    val = np.sort(rest[len(rest) - n_val:]) if n_val else np.array([], dtype=np.int64)
    known = np.sort(rest[: len(rest) - n_val])
    return SplitPlan(known, val, test, int(math.floor(time_fraction * dataset.n_steps)))


def window_starts(span: int, length: int, stride: int) -> np.ndarray:
    if length > span:
        raise ValueError(f"window length {length} exceeds span {span}")
    return np.arange(0, (span - length) // stride + 1) * stride


def make_windows(dataset: Dataset, split: SplitPlan, length: int = 24, stride: int | None = None,
                 phase: str = "train", scaler: tuple[float, float] = (0.0, 1.0)) -> list[KrigeBatch]:
    """Single-window batches.

    ``train`` windows come from the training span and contain only known
    sensors.  ``eval`` windows come from the evaluation span, contain every
    sensor, and have validation/test rows zeroed.
    """
    mu, sd = scaler
    if phase == "train":
        stride = 1 if stride is None else stride
        lo, hi = 0, split.time_boundary
        sensors = split.known
        known = np.ones(sensors.size, dtype=bool)
    elif phase == "eval":
        stride = length if stride is None else stride
        lo, hi = split.time_boundary, dataset.n_steps
        sensors = np.arange(dataset.n_sensors)
        known = np.isin(sensors, split.known)
    else:
        raise ValueError(f"unknown window phase {phase!r}")
    adjacency = row_normalize(dataset.adjacency[np.ix_(sensors, sensors)])
    coords = dataset.coords[sensors] if dataset.coords is not None else None
    data = (dataset.series[sensors, lo:hi] - mu) / sd
    out = []
    for s in window_starts(hi - lo, length, stride):
        target = data[:, s:s + length]
        x = target * known[:, None]
        ts = dataset.timestamps([lo + s])
        out.append(KrigeBatch(x, adjacency, ts, known, np.zeros_like(known), coords,
                              target[None].copy(), sensors))
    return out


def collate(windows: Sequence[KrigeBatch]) -> KrigeBatch:
    """Stack windows that share sensors into one batch."""
    first = windows[0]
    return KrigeBatch(
        np.concatenate([w.x for w in windows]), first.adjacency,
        np.concatenate([w.timestamps for w in windows]), first.known, first.masked, first.coords,
        np.concatenate([w.target for w in windows]) if first.target is not None else None,
        first.sensor_index,
    )


def batch_windows(windows: Sequence[KrigeBatch], batch_size: int,
                  rng: np.random.Generator | None = None) -> list[KrigeBatch]:
    order = np.arange(len(windows)) if rng is None else rng.permutation(len(windows))
    return [collate([windows[i] for i in order[k:k + batch_size]]) for k in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Shifted copies of one parent signal on a random sensor layout.

    The parent is a dominant tone of period ``period`` plus a slow trend.
    Shifts model a wave front moving west to east:

    * ``"banded"`` splits the longitude range into ``max_shift + 1`` equal
      bands with one delay each (the default);
    * ``"spatial"`` rounds a delay proportional to longitude;
    * ``"random"`` draws delays independently of position.

    The default layout is a north-south corridor (``lat_extent`` much larger
    than ``lon_extent``), so nearest neighbours often straddle delay bands.
    """

    n: int = 30
    t: int = 2000
    period: int = 12
    max_shift: int = 3
    k_neighbors: int = 4
    noise_std: float = 0.1
    seed: int = 0
    amplitude: float = 1.0
    trend_amplitude: float = 0.5
    trend_period: float = 1000.0
    shift_mode: str = "banded"
    step_minutes: int = 5
    start: str = "2024-01-01T00:00"
    lat0: float = 34.0
    lon0: float = -118.4
    lat_extent: float = 0.2
    lon_extent: float = 0.04


def parent_signal(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(spec.t)
    phase0 = rng.uniform(0, 2 * np.pi)
    tone = spec.amplitude * np.sin(2 * np.pi * t / spec.period + phase0)
    slow = spec.trend_amplitude * np.sin(2 * np.pi * t / spec.trend_period + rng.uniform(0, 2 * np.pi))
    return tone + slow


def knn_adjacency(coords: np.ndarray, k: int) -> np.ndarray:
    """Symmetric k-nearest-neighbour graph with Gaussian distance weights."""
    n = coords.shape[0]
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    k = min(k, n - 1)
    nn_idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    sigma = np.mean(np.take_along_axis(d, nn_idx, axis=1))
    adj = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k)
    adj[rows, nn_idx.ravel()] = np.exp(-(d[rows, nn_idx.ravel()] / sigma) ** 2)
    return np.maximum(adj, adj.T)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, np.ndarray]:
    """Dataset plus the integer shift of every sensor relative to the parent."""
    if spec.max_shift >= spec.period:
        raise ValueError("shifts must stay below the base period")
    rng = np.random.default_rng(spec.seed)
    unit = rng.uniform(0.0, 1.0, size=(spec.n, 2))
    span = np.array([spec.lat_extent, spec.lon_extent])
    coords = np.array([spec.lat0, spec.lon0]) + span * unit
    if spec.shift_mode == "spatial":
        shifts = np.rint(spec.max_shift * unit[:, 1]).astype(np.int64)
    elif spec.shift_mode == "banded":
        # equal-width longitude bands, one delay per band
        shifts = np.minimum(np.floor((spec.max_shift + 1) * unit[:, 1]), spec.max_shift).astype(np.int64)
    elif spec.shift_mode == "random":
        shifts = rng.integers(0, spec.max_shift + 1, size=spec.n)
    else:
        raise ValueError(f"unknown shift mode {spec.shift_mode!r}")
    parent = parent_signal(spec, rng)
    series = np.stack([np.roll(parent, s) for s in shifts])
    if spec.noise_std > 0:
        series = series + rng.normal(0.0, spec.noise_std, size=series.shape)
    adj = knn_adjacency(span * unit, spec.k_neighbors)
    ids = [f"s{i:03d}" for i in range(spec.n)]
    ds = Dataset(series, ids, adj, coords, spec.step_minutes, np.datetime64(spec.start, "m"))
    return ds, shifts


def circular_lag(x: np.ndarray, y: np.ndarray) -> int:
    """Lag ``s`` maximising ``sum_t y[t] * x[t - s]`` (so ``y ~ roll(x, s)``).

    Extra leading axes are summed, which pools several windows.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[-1]
    score = np.array([np.sum(y * np.roll(x, s, axis=-1)) for s in range(n)])
    s = int(np.argmax(score))
    return s - n if s > n // 2 else s


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"STKG"
FORMAT_VERSION = 1


def encode_state(state: "OrderedDict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode_state(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (n_name,) = struct.unpack("<I", take(4))
        name = bytes(take(n_name)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * size)), dtype="<f8").reshape(shape)
        state[name] = arr.astype(np.float64)
    if pos != len(view):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return state


def save_checkpoint(model, path) -> None:
    """Write every parameter and buffer of ``model`` (or a state dict)."""
    state = model.state_dict() if hasattr(model, "state_dict") else model
    Path(path).write_bytes(encode_state(state))


def load_checkpoint(path, model=None):
    """State dict from ``path``; loaded into ``model`` (and returned) if given."""
    state = decode_state(Path(path).read_bytes())
    if model is None:
        return state
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# key=value config files
# ---------------------------------------------------------------------------

def _coerce(text: str, current):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text.strip()


def apply_overrides(obj, values: dict[str, str], section: str) -> None:
    names = {f.name for f in fields(obj)}
    for key, text in values.items():
        if key not in names:
            raise ValueError(f"[{section}] unknown key {key!r}")
        setattr(obj, key, _coerce(text, getattr(obj, key)))


def read_config(path, targets: dict[str, object]) -> None:
    """Apply ``[section] key = value`` pairs onto the dataclasses in ``targets``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(path):
        raise FileNotFoundError(path)
    for section in parser.sections():
        if section not in targets:
            raise ValueError(f"unknown config section [{section}]")
        apply_overrides(targets[section], dict(parser[section]), section)


def write_config(path, sources: dict[str, object]) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, obj in sources.items():
        parser[section] = {f.name: str(getattr(obj, f.name)) for f in fields(obj)
                           if not hasattr(getattr(obj, f.name), "__dataclass_fields__")}
    with open(path, "w") as fh:
        parser.write(fh)
