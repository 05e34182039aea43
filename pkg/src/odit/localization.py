"""Post-alarm localization of anomalous dimensions.

After an alarm, the per-dimension contributions ``delta_t^i`` (squared gaps
to the kNN neighbours) of the ``S`` samples following the onset estimate
``tau_hat`` are compared with their nominal means by a one-sided t-test.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import betainc

from .core import ConfigError, DataError
from .detectors import DetectorState, Odit2Model, TrainedModel
from .knn import NeighborResult, per_dimension_gaps


class InsufficientSamples(DataError):
    """Fewer than S post-onset samples were observed; extend observation before localizing."""


@dataclass(frozen=True)
class LocalizationConfig:
    S: int = 2
    beta: float = 0.05
    gamma_fixed: int = 2

    def __post_init__(self):
        if self.S < 2:
            raise ConfigError("S must be at least 2")
        if not 0 < self.beta < 1:
            raise ConfigError("beta must lie in (0, 1)")
        if self.gamma_fixed != 2:
            raise ConfigError("contribution decomposition is defined for gamma = 2 only")

    @property
    def theta(self) -> float:
        return student_t_threshold(self.beta, self.S - 1)


@dataclass(frozen=True)
class DimensionResult:
    dimension: int
    t_stat: float
    flagged: bool


@dataclass(frozen=True)
class LocalizationReport:
    per_dimension: list
    tau_hat: int
    mu_baseline: np.ndarray
    samples: np.ndarray
    theta: float

    @property
    def flagged(self) -> list[int]:
        return [r.dimension for r in self.per_dimension if r.flagged]

    @property
    def t_stats(self) -> np.ndarray:
        return np.array([r.t_stat for r in self.per_dimension])


def contribution_decompose(x, neighbors: NeighborResult) -> np.ndarray:
    if neighbors.per_dimension_sq is None:
        raise DataError("neighbour result carries no per-dimension decomposition")
    return np.asarray(neighbors.per_dimension_sq, dtype=np.float64)


def _t_cdf(t: float, dof: int) -> float:
    x = dof / (dof + t * t)
    tail = 0.5 * betainc(dof / 2.0, 0.5, x)
    return 1.0 - tail if t >= 0 else tail


def student_t_threshold(beta: float, dof: int) -> float:
    """(1 - beta) quantile of Student's t with ``dof`` degrees of freedom.

    Found by bracketing and root-finding on the CDF written through the
    regularized incomplete beta function.
    """
    if dof < 1:
        raise ConfigError("degrees of freedom must be at least 1")
    if not 0 < beta < 1:
        raise ConfigError("beta must lie in (0, 1)")
    p = 1.0 - beta
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_threshold(1.0 - beta, dof)
    hi = 1.0
    while _t_cdf(hi, dof) < p:
        hi *= 2.0
    return brentq(lambda t: _t_cdf(t, dof) - p, 0.0, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps)


def t_statistics(samples: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """One-sided t-statistics ``(mean - mu) / (eta / sqrt(S))`` per column.

    A column with zero spread gets +inf or -inf by the sign of
    ``mean - mu`` (-inf when they coincide, so it is never flagged).
    """
    S = samples.shape[0]
    mean = samples.mean(axis=0)
    eta = samples.std(axis=0, ddof=1)
    diff = mean - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / (eta / math.sqrt(S))
    zero = eta == 0
    t[zero] = np.where(diff[zero] > 0, np.inf, -np.inf)
    return t


def _flags(t: np.ndarray, theta: float) -> np.ndarray:
    # infinite statistics come from zero spread: flagged iff mean > mu
    return np.where(np.isinf(t), t > 0, t >= theta)


def nominal_baseline(model, chunk: int = 4096) -> np.ndarray:
    """Mean per-dimension contribution over the part1 training points.

    For an ODIT-2 model the contributions are the differences between the
    nominal-side and anomaly-side gaps.  Cached on the model.
    """
    if "mu" in model._baselines:
        return model._baselines["mu"]
    nominal = model.nominal if isinstance(model, Odit2Model) else model
    X = nominal.partition.part1.rows
    total = np.zeros(nominal.dim)
    for start in range(0, X.shape[0], chunk):
        block = X[start:start + chunk]
        contrib = _training_gaps(nominal, block, start)
        if isinstance(model, Odit2Model):
            _, idx = model.index.query(block, nominal.config.k)
            contrib = contrib - per_dimension_gaps(block, model.anomaly_reference, idx, nominal.config.s)
        total += contrib.sum(axis=0)
    mu = total / X.shape[0]
    model._baselines["mu"] = mu
    return mu


def _training_gaps(model: TrainedModel, block: np.ndarray, start: int) -> np.ndarray:
    tail = model.training_tail_idx
    if tail is not None:
        return per_dimension_gaps(block, model.index.data, tail[start:start + block.shape[0]], tail.shape[1])
    # models assembled by hand: search again, excluding self in no-split mode
    exclude = None if model.partition.split else np.arange(start, start + block.shape[0])
    _, idx = model.index.query(block, model.config.k, exclude=exclude)
    return per_dimension_gaps(block, model.index.data, idx, model.config.s)


def post_onset_contributions(state: DetectorState, S: int) -> np.ndarray:
    if not state.alarm:
        raise DataError("detector has not alarmed")
    tau_hat = state.tau_hat
    rows = [rec.contributions for rec in state.evidence_log if tau_hat < rec.t <= tau_hat + S]
    if len(rows) < S:
        raise InsufficientSamples(
            f"only {len(rows)} of S={S} samples after tau_hat={tau_hat}; extend observation before localizing")
    if any(r is None for r in rows):
        raise DataError("evidence log lacks per-dimension contributions")
    return np.vstack(rows)


def localize(model, state: DetectorState, config: LocalizationConfig = LocalizationConfig(),
             variant: str | None = None, mu: np.ndarray | None = None) -> LocalizationReport:
    """Flag dimensions whose post-onset contributions exceed the nominal mean.

    ``variant`` is inferred from the model type when omitted; the ODIT-2
    variant works on nominal-minus-anomaly contribution differences.
    """
    expected = "odit2" if isinstance(model, Odit2Model) else "odit"
    if variant is not None and variant != expected:
        raise ConfigError(f"variant {variant!r} does not match a {type(model).__name__}")
    samples = post_onset_contributions(state, config.S)
    if mu is None:
        mu = nominal_baseline(model)
    t = t_statistics(samples, mu)
    theta = config.theta
    rows = [DimensionResult(i, float(v), bool(f)) for i, (v, f) in enumerate(zip(t, _flags(t, theta)))]
    return LocalizationReport(rows, state.tau_hat, mu, samples, theta)


def aggregate_dimensions(report: LocalizationReport, groups, beta: float | None = None) -> LocalizationReport:
    """Re-run the t-test on group sums of contributions (e.g. one group per device).

    ``groups`` is a list of index sequences or ``range`` objects that must
    partition the report's dimensions.
    """
    d = report.samples.shape[1]
    members = [np.asarray(list(g), dtype=np.intp) for g in groups]
    flat = np.concatenate(members) if members else np.array([], dtype=np.intp)
    if flat.size != d or not np.array_equal(np.sort(flat), np.arange(d)):
        raise DataError("groups must partition the dimensions without overlap")
    samples = np.column_stack([report.samples[:, m].sum(axis=1) for m in members])
    mu = np.array([report.mu_baseline[m].sum() for m in members])
    theta = report.theta if beta is None else student_t_threshold(beta, report.samples.shape[0] - 1)
    t = t_statistics(samples, mu)
    rows = [DimensionResult(g, float(v), bool(f)) for g, (v, f) in enumerate(zip(t, _flags(t, theta)))]
    return LocalizationReport(rows, report.tau_hat, mu, samples, theta)


def write_report_csv(report: LocalizationReport, path, groups=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if groups is None:
            writer.writerow(["dimension", "t_stat", "flagged"])
            for r in report.per_dimension:
                writer.writerow([r.dimension, repr(r.t_stat), int(r.flagged)])
        else:
            writer.writerow(["group_id", "dimension", "t_stat", "flagged"])
            for r, g in zip(report.per_dimension, groups):
                g = list(g)
                writer.writerow([r.dimension, f"{min(g)}-{max(g)}", repr(r.t_stat), int(r.flagged)])
