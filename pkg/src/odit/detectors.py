"""ODIT, ODIT-2 and ODIT-uni sequential detectors.

A detector turns each observation into a signed anomaly evidence ``D_t``
derived from kNN total distances and accumulates it in a CUSUM-like
statistic ``Delta_t = max(Delta_{t-1} + D_t, 0)``; an alarm is raised the
first time ``Delta_t >= h``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from .core import (ANOMALOUS, DataError, Dataset, DetectorConfig, ObservationVector, Partition,
                   as_matrix, derive_seed, partition_dataset)
from .knn import ExactIndex, make_index, per_dimension_gaps


def total_distances(dists: np.ndarray, s: int, gamma: float) -> np.ndarray:
    """Sum of ``g_n ** gamma`` over the last ``s`` of each row's k sorted distances."""
    k = dists.shape[1]
    tail = dists[:, k - s:]
    if gamma == 1:
        return tail.sum(axis=1)
    return (tail ** gamma).sum(axis=1)


def total_distance(x, reference, k: int, s: int, gamma: float) -> float:
    """Total kNN distance of one observation against a reference set or index."""
    if not 1 <= s <= k:
        raise DataError("need 1 <= s <= k")
    index = reference if hasattr(reference, "query") else ExactIndex(
        reference.rows if isinstance(reference, Dataset) else reference)
    vec = x.values if isinstance(x, ObservationVector) else x
    dists, _ = index.query(as_matrix(vec, index.dim), k)
    return float(total_distances(dists, s, gamma)[0])


def _floor(values: np.ndarray, floor: float) -> np.ndarray:
    return np.maximum(values, floor)


@dataclass
class TrainedModel:
    """Nominal ODIT model: reference part2 plus the borderline total distance.

    ``floor_L`` is the smallest positive training total distance; a test
    total distance of zero is clamped to it before taking logs.
    ``training_tail_idx`` keeps the last ``s`` neighbours of every part1
    point so per-dimension training contributions need no second search.
    """

    partition: Partition
    config: DetectorConfig
    K: int
    borderline_LK: float
    training_L: np.ndarray
    floor_L: float
    index: object
    training_tail_idx: np.ndarray | None = field(default=None, repr=False)
    _baselines: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.partition.part2.dim

    @property
    def backend(self) -> str:
        return self.index.backend

    @property
    def reference_size(self) -> int:
        return self.index.size

    def with_alpha(self, alpha: float) -> "TrainedModel":
        """Same partition and distances, different significance level."""
        config = self.config.replace(alpha=alpha)
        K = _rank(len(self.training_L), alpha)
        return replace(self, config=config, K=K,
                       borderline_LK=_kth_smallest(self.training_L, K), _baselines={})

    def with_index(self, index) -> "TrainedModel":
        """Swap the query backend over the same reference rows (training stats kept)."""
        if index.size != self.reference_size or index.dim != self.dim:
            raise DataError("replacement index does not match the reference set")
        return replace(self, index=index, _baselines={})

    def neighbors(self, X):
        return self.index.query(as_matrix(X, self.dim), self.config.k)

    def totals(self, X, want_contributions: bool = False):
        X = as_matrix(X, self.dim)
        dists, idx = self.index.query(X, self.config.k)
        L = total_distances(dists, self.config.s, self.config.gamma)
        contrib = per_dimension_gaps(X, self.index.data, idx, self.config.s) if want_contributions else None
        return L, contrib

    def evidence(self, X, want_contributions: bool = False):
        """Anomaly evidence ``d * (ln L_t - ln L_(K))`` for each row of ``X``."""
        L, contrib = self.totals(X, want_contributions)
        D = self.dim * (np.log(_floor(L, self.floor_L)) - math.log(max(self.borderline_LK, self.floor_L)))
        return D, contrib


def _rank(n1: int, alpha: float) -> int:
    K = int(math.floor(n1 * (1.0 - alpha) + 1e-9))
    if K < 1:
        raise DataError(f"alpha={alpha} leaves K={K} < 1 for N1={n1}")
    return K


def _kth_smallest(values: np.ndarray, K: int) -> float:
    return float(np.partition(values, K - 1)[K - 1])


def train_odit(nominal: Dataset, config: DetectorConfig, backend: str = "exact", *,
               C: int = 100, Imax: int = 10, B: int = 1000, index=None) -> TrainedModel:
    """Partition the nominal set, score part1 against part2 and find ``L_(K)``.

    Parameters
    ----------
    nominal : Dataset
        Nominal training data.
    config : DetectorConfig
        ``partition_ratio == 1`` trains without a split, scoring every point
        against the rest of the set.
    backend : {"exact", "approximate"}
        Query backend over part2; ``C``, ``Imax`` and ``B`` configure the
        k-means tree of the approximate backend.
    index : optional
        Prebuilt index over part2 (skips building one).
    """
    if nominal.label != "nominal":
        raise DataError("ODIT trains on nominal data only")
    part = partition_dataset(nominal, config.partition_ratio, config.rng_seed)
    if index is None:
        index = make_index(part.part2.rows, backend, C=C, Imax=Imax, B=B,
                           seed=derive_seed(config.rng_seed, "kmeans-tree"))
    if config.k > index.size - (not part.split):
        raise DataError(f"k={config.k} exceeds the reference set size")
    exclude = None if part.split else np.arange(len(part.part1))
    dists, idx = index.query(part.part1.rows, config.k, exclude=exclude)
    L = total_distances(dists, config.s, config.gamma)
    K = _rank(len(L), config.alpha)
    positive = L[L > 0]
    if positive.size == 0:
        raise DataError("all training total distances are zero")
    tail = np.ascontiguousarray(idx[:, config.k - config.s:])
    return TrainedModel(part, config, K, _kth_smallest(L, K), L, float(positive.min()), index, tail)


def odit_evidence(model: TrainedModel, x) -> float:
    D, _ = model.evidence(as_matrix(x.values if isinstance(x, ObservationVector) else x, model.dim))
    return float(D[0])


# ---------------------------------------------------------------------------
# ODIT-2

def clean_anomaly_set(nominal_model: TrainedModel, raw_anomaly: Dataset) -> Dataset:
    """Drop anomaly points that fall inside the nominal minimum-volume set."""
    L, _ = nominal_model.totals(raw_anomaly.rows)
    keep = np.flatnonzero(L > nominal_model.borderline_LK)
    if keep.size == 0:
        raise DataError("anomaly set indistinguishable from nominal")
    return Dataset(raw_anomaly.rows[keep], ANOMALOUS, raw_anomaly.name + "/clean")


@dataclass
class Odit2Model:
    """Supervised variant with an anomaly reference set.

    ``nominal_size_N`` is the size of the nominal reference (part2) that
    ``L_t`` is measured against, and ``M`` the anomaly reference size; the
    evidence carries the ``ln(N/M)`` imbalance correction.
    """

    nominal: TrainedModel
    anomaly_reference: np.ndarray
    index: ExactIndex
    nominal_size_N: int
    recleaning: bool = False
    _baselines: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.nominal.dim

    @property
    def M(self) -> int:
        return self.anomaly_reference.shape[0]

    @property
    def imbalance_correction(self) -> float:
        return math.log(self.nominal_size_N / self.M)

    def evidence(self, X, want_contributions: bool = False, nominal_terms=None):
        X = as_matrix(X, self.dim)
        if nominal_terms is None:
            nominal_terms = self.nominal.totals(X, want_contributions)
        L, contrib = nominal_terms
        cfg = self.nominal.config
        dists, idx = self.index.query(X, cfg.k)
        L2 = total_distances(dists, cfg.s, cfg.gamma)
        floor = self.nominal.floor_L
        D = self.dim * (np.log(_floor(L, floor)) - np.log(_floor(L2, floor))) + self.imbalance_correction
        if want_contributions:
            contrib = contrib - per_dimension_gaps(X, self.anomaly_reference, idx, cfg.s)
        return D, contrib

    def augment(self, points) -> int:
        """Append confirmed anomalous points; returns how many were added."""
        pts = as_matrix(points, self.dim)
        if self.recleaning and pts.shape[0]:
            L, _ = self.nominal.totals(pts)
            pts = pts[L > self.nominal.borderline_LK]
        if pts.shape[0] == 0:
            return 0
        self.anomaly_reference = np.vstack([self.anomaly_reference, pts])
        self.index = ExactIndex(self.anomaly_reference)
        self._baselines.clear()
        return pts.shape[0]


def build_odit2(nominal_model: TrainedModel, raw_anomaly: Dataset, clean: bool = True,
                recleaning: bool = False) -> Odit2Model:
    """Assemble ODIT-2 from a nominal model (its alpha drives the cleaning)."""
    if raw_anomaly.dim != nominal_model.dim:
        raise DataError("anomaly set dimension differs from the nominal model")
    ref = clean_anomaly_set(nominal_model, raw_anomaly) if clean else raw_anomaly
    if nominal_model.config.k > len(ref):
        raise DataError("k exceeds the cleaned anomaly set size")
    return Odit2Model(nominal_model, ref.rows.copy(), ExactIndex(ref.rows),
                      nominal_model.reference_size, recleaning)


def odit2_evidence(model: Odit2Model, x) -> float:
    D, _ = model.evidence(as_matrix(x.values if isinstance(x, ObservationVector) else x, model.dim))
    return float(D[0])


# ---------------------------------------------------------------------------
# sequential statistic

@dataclass
class EvidenceRecord:
    t: int
    D: float
    delta: float
    contributions: np.ndarray | None = None


@dataclass
class DetectorState:
    statistic_delta: float = 0.0
    last_zero_time: int = 0
    alarm: bool = False
    alarm_time_T: int | None = None
    tau_hat: int | None = None
    t: int = 0
    evidence_log: list = field(default_factory=list)

    def reset(self) -> None:
        """Clear the statistic after an alarm so a stream can raise further alarms."""
        self.statistic_delta = 0.0
        self.last_zero_time = self.t
        self.alarm = False
        self.alarm_time_T = None
        self.tau_hat = None


def update_statistic(state: DetectorState, D: float, h: float) -> DetectorState:
    state.t += 1
    state.statistic_delta = max(state.statistic_delta + float(D), 0.0)
    if state.alarm:
        return state
    if state.statistic_delta == 0.0:
        state.last_zero_time = state.t
    elif state.statistic_delta >= h:
        state.alarm = True
        state.alarm_time_T = state.t
        state.tau_hat = state.last_zero_time
    return state


def cusum_path(D: np.ndarray) -> np.ndarray:
    """Full ``Delta_t`` trajectory for an evidence sequence, without stopping."""
    out = np.empty(len(D))
    acc = 0.0
    for i, d in enumerate(np.asarray(D, dtype=np.float64).tolist()):
        acc = acc + d
        if acc < 0.0:
            acc = 0.0
        out[i] = acc
    return out


def statistic_path(model, X) -> np.ndarray:
    D, _ = model.evidence(X)
    return cusum_path(D)


def _chunks(stream, size: int) -> Iterator[np.ndarray]:
    if isinstance(stream, Dataset):
        stream = stream.rows
    if isinstance(stream, np.ndarray):
        arr = as_matrix(stream)
        for start in range(0, arr.shape[0], size):
            yield arr[start:start + size]
        return
    buf = []
    for row in stream:
        buf.append(row.values if isinstance(row, ObservationVector) else np.asarray(row, dtype=np.float64))
        if len(buf) == size:
            yield np.vstack(buf)
            buf = []
    if buf:
        yield np.vstack(buf)


EventCallback = Callable[[EvidenceRecord, DetectorState], None]


def run_detector(model, stream, h: float, *, localize_samples: int = 0, record: bool = True,
                 record_contributions: bool | None = None, chunk_size: int = 64,
                 on_event: EventCallback | None = None) -> DetectorState:
    """Feed a stream through an ODIT or ODIT-2 model until it alarms.

    With ``localize_samples = S > 0`` the run continues past the alarm until
    ``tau_hat + S`` samples have been seen, so that localization has its
    post-onset window.  ``stream`` may be an array, a Dataset or any
    iterable of rows (consumed lazily).
    """
    if record_contributions is None:
        record_contributions = localize_samples > 0
    state = DetectorState()
    for X in _chunks(stream, chunk_size):
        D, contrib = model.evidence(X, want_contributions=record_contributions)
        for j in range(X.shape[0]):
            update_statistic(state, D[j], h)
            rec = EvidenceRecord(state.t, float(D[j]), state.statistic_delta,
                                 contrib[j] if record_contributions else None)
            if record:
                state.evidence_log.append(rec)
            if on_event is not None:
                on_event(rec, state)
            if state.alarm and state.t >= max(state.alarm_time_T, state.tau_hat + localize_samples):
                return state
    return state


def run_odit_uni(odit_model: TrainedModel, odit2_model: Odit2Model, stream, h1: float, h2: float, *,
                 chunk_size: int = 32, record: bool = False):
    """Run ODIT and ODIT-2 in lockstep and stop at the first alarm of either.

    When ODIT alarms first, the samples after its onset estimate are added
    to the ODIT-2 anomaly reference (the model is updated in place and also
    returned).  A simultaneous alarm counts as an ODIT-2 detection.
    """
    s1, s2 = DetectorState(), DetectorState()
    pending: list[np.ndarray] = []
    c1, c2 = odit_model.config, odit2_model.nominal.config
    share = odit2_model.nominal.index is odit_model.index and (c1.k, c1.s, c1.gamma) == (c2.k, c2.s, c2.gamma)
    for X in _chunks(stream, chunk_size):
        terms = odit_model.totals(X)
        D1 = odit_model.dim * (np.log(_floor(terms[0], odit_model.floor_L))
                               - math.log(max(odit_model.borderline_LK, odit_model.floor_L)))
        D2, _ = odit2_model.evidence(X, nominal_terms=terms if share else None)
        for j in range(X.shape[0]):
            update_statistic(s1, D1[j], h1)
            update_statistic(s2, D2[j], h2)
            if record:
                s1.evidence_log.append(EvidenceRecord(s1.t, float(D1[j]), s1.statistic_delta))
                s2.evidence_log.append(EvidenceRecord(s2.t, float(D2[j]), s2.statistic_delta))
            if s1.statistic_delta == 0.0:
                pending.clear()
            else:
                pending.append(X[j])
            if s2.alarm:
                return s1, s2, odit2_model
            if s1.alarm:
                odit2_model.augment(np.vstack(pending))
                return s1, s2, odit2_model
    return s1, s2, odit2_model


def calibrate_threshold(model, nominal_stream, margin: float = 1.05) -> float:
    """Smallest-margin threshold with no alarm over a nominal calibration run."""
    peak = float(statistic_path(model, nominal_stream).max(initial=0.0))
    return peak * margin if peak > 0 else 1e-12


class EventLogWriter:
    """Line-oriented event log: ``t,D_t,Delta_t,alarm_flag``."""

    header = ("t", "D_t", "Delta_t", "alarm_flag")

    def __init__(self, path, extra: Iterable[str] = ()):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.header + tuple(extra))

    def __call__(self, rec: EvidenceRecord, state: DetectorState, *extra) -> None:
        flag = int(state.alarm and state.alarm_time_T is not None and rec.t >= state.alarm_time_T)
        self.row(rec.t, rec.D, rec.delta, flag, *extra)

    def row(self, t: int, D: float, delta: float, flag: int, *extra) -> None:
        self._writer.writerow([t, repr(float(D)), repr(float(delta)), int(flag), *(repr(float(v)) for v in extra)])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
