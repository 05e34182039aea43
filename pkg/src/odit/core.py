"""Shared data types, dataset I/O, configuration and seeding."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


class ConfigError(ValueError):
    """Raised for invalid detector or experiment configuration."""


NOMINAL = "nominal"
ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class ObservationVector:
    values: np.ndarray
    time_index: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise DataError("observation must be a 1-D vector")
        if not np.all(np.isfinite(values)):
            raise DataError(f"non-finite entry in observation at t={self.time_index}")
        if self.time_index < 0:
            raise DataError("time_index must be non-negative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Dataset:
    """An (N, d) block of observations, one row per time step.

    Rows are stored as a read-only float64 array so a dataset can be shared
    between trials without copying.
    """

    rows: np.ndarray
    label: str = NOMINAL
    name: str = ""

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64, order="C", copy=True)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise DataError("dataset needs at least one row and one column")
        if not np.all(np.isfinite(rows)):
            r, c = np.argwhere(~np.isfinite(rows))[0]
            raise DataError(f"non-finite value at row {r}, column {c}")
        if self.label not in (NOMINAL, ANOMALOUS):
            raise DataError(f"unknown label {self.label!r}")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def observations(self) -> Iterator[ObservationVector]:
        for i, row in enumerate(self.rows):
            yield ObservationVector(row, i + 1)

    def subset(self, indices, name: str | None = None) -> "Dataset":
        return Dataset(self.rows[np.asarray(indices, dtype=np.intp)], self.label,
                       self.name if name is None else name)


@dataclass(frozen=True)
class Partition:
    part1: Dataset
    part2: Dataset
    ratio: float
    index1: np.ndarray
    index2: np.ndarray

    @property
    def split(self) -> bool:
        """False in no-partition mode, where both parts are the full set."""
        return self.ratio < 1.0


@dataclass(frozen=True)
class DetectorConfig:
    k: int = 1
    s: int = 1
    gamma: float = 1.0
    alpha: float = 0.05
    threshold_h: float = 10.0
    partition_ratio: float = 0.38
    rng_seed: int = 0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError("k must be a positive integer")
        if int(self.s) != self.s or not 1 <= self.s <= self.k:
            raise ConfigError("s must be an integer in [1, k]")
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        # alpha = 0 is accepted as the keep-everything limit
        if not 0 <= self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not self.threshold_h > 0:
            raise ConfigError("threshold_h must be positive")
        if not 0 < self.partition_ratio <= 1:
            raise ConfigError("partition_ratio must lie in (0, 1]")
        if int(self.rng_seed) != self.rng_seed or not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must be a 64-bit unsigned integer")

    def replace(self, **changes) -> "DetectorConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "DetectorConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# seeding

def _label_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode())


def derive_seed(master: int, *labels) -> int:
    """Deterministic 64-bit sub-seed for a named stochastic choice."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, *map(_label_int, labels)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


# ---------------------------------------------------------------------------
# partitioning

def partition_dataset(data: Dataset, ratio: float = 0.38, seed: int = 0) -> Partition:
    """Randomly split a nominal set into part1 (size round(ratio*N)) and part2.

    ``ratio == 1`` selects no-partition mode: both parts are the whole set and
    callers must exclude each point's self-match when ranking.
    """
    if data.label != NOMINAL:
        raise DataError("only nominal datasets are partitioned")
    n = len(data)
    if n < 2:
        raise DataError("partitioning needs at least 2 rows")
    if not 0 < ratio <= 1:
        raise ConfigError("partition ratio must lie in (0, 1]")
    if ratio == 1:
        idx = np.arange(n)
        return Partition(data, data, 1.0, idx, idx)
    n1 = int(math.floor(ratio * n + 0.5))
    if n1 < 1 or n1 >= n:
        raise ConfigError(f"ratio {ratio} leaves an empty part for N={n}")
    perm = np.random.default_rng(seed).permutation(n)
    idx1 = np.sort(perm[:n1])
    idx2 = np.sort(perm[n1:])
    return Partition(data.subset(idx1, data.name + "/part1"),
                     data.subset(idx2, data.name + "/part2"), ratio, idx1, idx2)


# ---------------------------------------------------------------------------
# CSV I/O

def _parse_row(cells: Sequence[str], lineno: int) -> list[float]:
    row = []
    for col, cell in enumerate(cells):
        try:
            value = float(cell)
        except ValueError:
            raise DataError(f"line {lineno}, column {col}: not a number: {cell!r}") from None
        if not math.isfinite(value):
            raise DataError(f"line {lineno}, column {col}: non-finite value {cell!r}")
        row.append(value)
    return row


def iter_csv_rows(path, has_header: bool = False) -> Iterator[np.ndarray]:
    """Yield parsed rows one at a time; used for bounded-memory streaming."""
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, cells in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not cells or all(not c.strip() for c in cells):
                continue
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(f"line {lineno}: expected {width} columns, found {len(cells)}")
            yield np.array(_parse_row(cells, lineno))


def load_csv(path, has_header: bool = False, label: str = NOMINAL, name: str | None = None) -> Dataset:
    rows = list(iter_csv_rows(path, has_header))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.vstack(rows), label, Path(path).stem if name is None else name)


def save_csv(data: Dataset | np.ndarray, path, header: Sequence[str] | None = None) -> None:
    rows = data.rows if isinstance(data, Dataset) else np.atleast_2d(data)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header is not None:
            writer.writerow(header)
        for row in rows:
            # repr round-trips float64 exactly
            writer.writerow([repr(float(v)) for v in row])


def stack_devices(per_device: Sequence[Dataset], name: str = "stacked") -> Dataset:
    """Concatenate per-device datasets column-wise, row t with row t."""
    if not per_device:
        raise DataError("nothing to stack")
    lengths = {len(ds) for ds in per_device}
    if len(lengths) != 1:
        raise DataError(f"unequal row counts: {sorted(lengths)}")
    labels = {ds.label for ds in per_device}
    label = ANOMALOUS if ANOMALOUS in labels else NOMINAL
    return Dataset(np.hstack([ds.rows for ds in per_device]), label, name)


def as_matrix(x, dim: int | None = None) -> np.ndarray:
    """Coerce an observation, list of observations or Dataset to an (n, d) array."""
    if isinstance(x, Dataset):
        arr = x.rows
    elif isinstance(x, ObservationVector):
        arr = x.values[None, :]
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError("expected a vector or a 2-D array of observations")
    if dim is not None and arr.shape[1] != dim:
        raise DataError(f"dimension mismatch: expected {dim}, got {arr.shape[1]}")
    return arr
