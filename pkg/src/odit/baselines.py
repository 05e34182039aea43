"""Comparison detectors sharing the ODIT stream interface.

Every detector here exposes ``path(X)``, the statistic trajectory over a
block of observations, so the evaluation harness can treat them exactly
like the kNN detectors (``run_baseline`` gives the alarm-time view).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import gammaln, ndtr

from .core import ConfigError, DataError, Dataset, as_matrix
from .detectors import DetectorState, cusum_path


# ---------------------------------------------------------------------------
# Gaussian models and the oracle CUSUM

@dataclass(frozen=True)
class GaussianModel:
    """Multivariate normal density; ``covariance`` may be a full matrix or a
    vector of per-stream variances (independent mode)."""

    mean: np.ndarray
    covariance: np.ndarray
    _chol: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.asarray(self.covariance, dtype=np.float64)
        d = mean.shape[0]
        if cov.ndim == 0:
            cov = np.full(d, float(cov))
        if cov.ndim == 1:
            if cov.shape[0] != d:
                raise DataError("variance vector length differs from the mean")
            if np.any(cov <= 0):
                raise DataError("variances must be positive")
            chol = None
        else:
            if cov.shape != (d, d):
                raise DataError("covariance shape does not match the mean")
            if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
                raise DataError("covariance is not symmetric")
            try:
                chol = cho_factor(cov, lower=True)
            except np.linalg.LinAlgError:
                raise DataError("covariance is not positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def independent(self) -> bool:
        return self._chol is None

    def logpdf(self, X) -> np.ndarray:
        X = as_matrix(X, self.dim)
        diff = X - self.mean
        if self.independent:
            var = self.covariance
            quad = (diff * diff / var).sum(axis=1)
            logdet = np.log(var).sum()
        else:
            c, _ = self._chol
            z = solve_triangular(c, diff.T, lower=True)
            quad = (z * z).sum(axis=0)
            logdet = 2.0 * np.log(np.diag(c)).sum()
        return -0.5 * (quad + logdet + self.dim * math.log(2 * math.pi))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        if self.independent:
            return self.mean + z * np.sqrt(self.covariance)
        return self.mean + z @ np.tril(self._chol[0]).T

    def mahalanobis_solve(self, v) -> np.ndarray:
        """Sigma^-1 v via the Cholesky factor."""
        if self.independent:
            return np.asarray(v) / self.covariance
        return cho_solve(self._chol, v)


def log_likelihood_ratio(X, f0: GaussianModel, f1: GaussianModel) -> np.ndarray:
    return f1.logpdf(X) - f0.logpdf(X)


def cusum_step(state: float, x, f0: GaussianModel, f1: GaussianModel) -> float:
    return max(0.0, state + float(log_likelihood_ratio(x, f0, f1)[0]))


class OracleCusum:
    """CUSUM with the exact pre- and post-change densities."""

    name = "oracle_cusum"

    def __init__(self, f0: GaussianModel, f1: GaussianModel):
        if f0.dim != f1.dim:
            raise DataError("f0 and f1 dimensions differ")
        self.f0, self.f1 = f0, f1

    @property
    def dim(self) -> int:
        return self.f0.dim

    def evidence(self, X, want_contributions: bool = False):
        return log_likelihood_ratio(X, self.f0, self.f1), None

    def path(self, X) -> np.ndarray:
        return cusum_path(self.evidence(X)[0])


# ---------------------------------------------------------------------------
# independent-stream G-CUSUM

def _stream_params(mean, std):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise DataError("zero-variance stream")
    return mean, std


def gcusum_increments(X, mean, std, assumed_shift: float = 3.0) -> np.ndarray:
    """Per-stream LLR of N(mu + shift*sigma, sigma^2) against N(mu, sigma^2)."""
    mean, std = _stream_params(mean, std)
    z = (as_matrix(X, mean.shape[0]) - mean) / std
    return assumed_shift * z - 0.5 * assumed_shift ** 2


def gcusum_step(states, x, mean, std, assumed_shift: float = 3.0):
    """One update of all per-stream CUSUMs; returns (new states, summed statistic)."""
    inc = gcusum_increments(x, mean, std, assumed_shift)[0]
    new = np.maximum(np.asarray(states, dtype=np.float64) + inc, 0.0)
    return new, float(new.sum())


class GCusum:
    """Per-stream CUSUMs assuming independent streams, summed into one statistic."""

    name = "gcusum"

    def __init__(self, mean, std, assumed_shift: float = 3.0):
        self.mean, self.std = _stream_params(mean, std)
        self.assumed_shift = float(assumed_shift)

    @classmethod
    def fit(cls, nominal: Dataset | np.ndarray, assumed_shift: float = 3.0) -> "GCusum":
        X = as_matrix(nominal)
        return cls(X.mean(axis=0), X.std(axis=0, ddof=1), assumed_shift)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def stream_paths(self, X) -> np.ndarray:
        inc = gcusum_increments(X, self.mean, self.std, self.assumed_shift)
        out = np.empty_like(inc)
        acc = np.zeros(inc.shape[1])
        for t in range(inc.shape[0]):
            acc = np.maximum(acc + inc[t], 0.0)
            out[t] = acc
        return out

    def path(self, X) -> np.ndarray:
        return self.stream_paths(X).sum(axis=1)


# ---------------------------------------------------------------------------
# windowed Renyi information metric

@dataclass(frozen=True)
class WindowDetectorConfig:
    window_W: int = 5
    renyi_alpha: float = 0.5
    support_sigmas: float = 10.0

    def __post_init__(self):
        if self.window_W < 2:
            raise ConfigError("window_W must be at least 2")
        if not self.renyi_alpha > 0 or self.renyi_alpha == 1:
            raise ConfigError("renyi_alpha must be positive and differ from 1")
        if not self.support_sigmas > 0:
            raise ConfigError("support_sigmas must be positive")


def renyi_divergence(p, q, alpha: float) -> np.ndarray:
    """D_alpha(P||Q) along the last axis of two (renormalized) pmf arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        terms = np.where(p > 0, p ** alpha * q ** (1.0 - alpha), 0.0)
        s = terms.sum(axis=-1)
        return np.log(s) / (alpha - 1.0)


def symmetric_renyi(p, q, alpha: float) -> np.ndarray:
    return renyi_divergence(p, q, alpha) + renyi_divergence(q, p, alpha)


def discretized_gaussian(mean, std, bins: np.ndarray) -> np.ndarray:
    """Gaussian mass on integer bins ``[b-0.5, b+0.5)``; rows renormalized."""
    mean = np.asarray(mean, dtype=np.float64)[:, None]
    std = np.asarray(std, dtype=np.float64)[:, None]
    p = ndtr((bins + 0.5 - mean) / std) - ndtr((bins - 0.5 - mean) / std)
    return p / p.sum(axis=-1, keepdims=True)


def discretized_poisson(rate, bins: np.ndarray) -> np.ndarray:
    rate = np.asarray(rate, dtype=np.float64)
    if np.any(rate <= 0):
        raise DataError("window mean must be positive for the Poisson model")
    with np.errstate(invalid="ignore"):
        logp = bins * np.log(rate)[..., None] - rate[..., None] - gammaln(bins + 1.0)
    logp = np.where(np.isfinite(bins), logp, -np.inf)
    logp -= logp.max(axis=-1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=-1, keepdims=True)


class InfoMetricDetector:
    """Sum over streams of the symmetric Renyi divergence between the
    trained (discretized Gaussian) model and a Poisson fit to the last
    ``W`` samples.  The statistic is 0 until the window is full."""

    name = "info_metric"

    def __init__(self, mean, std, config: WindowDetectorConfig = WindowDetectorConfig()):
        self.mean, self.std = _stream_params(mean, std)
        self.config = config
        top = np.ceil(np.maximum(self.mean + config.support_sigmas * self.std, 1.0)).astype(int)
        width = int(top.max()) + 1
        grid = np.arange(width, dtype=np.float64)
        # bins beyond a stream's own support are masked with +inf
        self.bins = np.where(grid[None, :] <= top[:, None], grid[None, :], np.inf)
        p = discretized_gaussian(self.mean, self.std, np.where(np.isfinite(self.bins), self.bins, 1e300))
        p[~np.isfinite(self.bins)] = 0.0
        self.train_pmf = p / p.sum(axis=1, keepdims=True)

    @classmethod
    def fit(cls, nominal, config: WindowDetectorConfig = WindowDetectorConfig()) -> "InfoMetricDetector":
        X = as_matrix(nominal)
        return cls(X.mean(axis=0), X.std(axis=0, ddof=1), config)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def window_statistic(self, window) -> float:
        """Statistic for one full ``(W, d)`` window."""
        return float(self.statistics(np.asarray(window).mean(axis=0)[None, :])[0])

    def statistics(self, rates: np.ndarray) -> np.ndarray:
        out = np.empty(rates.shape[0])
        a = self.config.renyi_alpha
        for i, r in enumerate(rates):
            q = discretized_poisson(r, self.bins)
            out[i] = symmetric_renyi(self.train_pmf, q, a).sum()
        return out

    def path(self, X) -> np.ndarray:
        X = as_matrix(X, self.dim)
        W = self.config.window_W
        out = np.zeros(X.shape[0])
        if X.shape[0] < W:
            return out
        csum = np.cumsum(np.vstack([np.zeros(self.dim), X]), axis=0)
        rates = (csum[W:] - csum[:-W]) / W
        out[W - 1:] = self.statistics(rates)
        return out


def info_metric_step(mean, std, window, renyi_alpha: float = 0.5) -> float:
    window = np.asarray(window, dtype=np.float64)
    cfg = WindowDetectorConfig(window_W=max(window.shape[0], 2), renyi_alpha=renyi_alpha)
    return InfoMetricDetector(mean, std, cfg).window_statistic(window)


# ---------------------------------------------------------------------------
# per-node rate threshold

def data_filter(x, per_node_threshold) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) > np.asarray(per_node_threshold, dtype=np.float64)


class DataFilter:
    name = "data_filter"

    def __init__(self, thresholds):
        self.thresholds = np.asarray(thresholds, dtype=np.float64)

    @classmethod
    def fit(cls, nominal, quantile: float = 0.99) -> "DataFilter":
        return cls(np.quantile(as_matrix(nominal), quantile, axis=0))

    def flags(self, X) -> np.ndarray:
        return data_filter(as_matrix(X, self.thresholds.shape[0]), self.thresholds)


def run_baseline(detector, stream, h: float) -> DetectorState:
    """Alarm-time view of a path detector, using the common state type."""
    state = DetectorState()
    path = detector.path(as_matrix(stream.rows if isinstance(stream, Dataset) else stream))
    for value in path.tolist():
        state.t += 1
        state.statistic_delta = value
        if value <= 0.0:
            state.last_zero_time = state.t
        elif value >= h:
            state.alarm, state.alarm_time_T, state.tau_hat = True, state.t, state.last_zero_time
            break
    return state
