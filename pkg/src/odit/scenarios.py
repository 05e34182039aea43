"""Synthetic scenarios: covariance change and low-rate DDoS, plus
N-BaIoT-style per-device CSV stacking.

Generators are pure functions of ``(scenario, seed)``.  Time indices are
1-based and the change takes effect at ``t = change_time_tau``, so a
stream has ``tau - 1`` nominal rows followed by anomalous ones.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import GaussianModel
from .core import (ANOMALOUS, NOMINAL, ConfigError, DataError, Dataset, load_csv, make_rng,
                   save_csv, stack_devices)


@dataclass(frozen=True)
class GroundTruth:
    tau: int
    affected: tuple
    horizon: int

    def to_dict(self) -> dict:
        return {"tau": self.tau, "affected": list(self.affected), "horizon": self.horizon}

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        return cls(int(data["tau"]), tuple(int(i) for i in data["affected"]), int(data["horizon"]))

    def mask(self, d: int) -> np.ndarray:
        m = np.zeros(d, dtype=bool)
        m[list(self.affected)] = True
        return m


def _check_time(tau: int, horizon: int) -> None:
    if tau < 1 or horizon < tau:
        raise ConfigError("need 1 <= change_time_tau <= horizon")


def _as_tuple(x):
    return None if x is None else tuple(int(i) for i in x)


class _JsonMixin:
    kind = ""

    def to_dict(self) -> dict:
        data = {"kind": self.kind}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            data[f.name] = list(v) if isinstance(v, tuple) else v
        return data

    @classmethod
    def from_dict(cls, data: dict):
        data = dict(data)
        kind = data.pop("kind", cls.kind)
        if kind != cls.kind:
            raise ConfigError(f"expected a {cls.kind!r} scenario, got {kind!r}")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# covariance change

@dataclass(frozen=True)
class CorrelationScenario(_JsonMixin):
    """Streams become equicorrelated (coefficient ``rho``) inside a random
    block of ``affected_fraction * d`` dimensions; means and variances stay.

    ``affected`` overrides the seeded choice of the block.
    """

    d: int = 100
    mu: float = 20.0
    sigma: float = 10.0
    rho: float = 0.6
    affected_fraction: float = 0.5
    change_time_tau: int = 100
    horizon: int = 200
    affected_set_seed: int = 0
    affected: tuple | None = None

    kind = "correlation"

    def __post_init__(self):
        object.__setattr__(self, "affected", _as_tuple(self.affected))
        if self.d < 1 or not self.sigma > 0:
            raise ConfigError("need d >= 1 and sigma > 0")
        if not -1 < self.rho < 1:
            raise ConfigError("rho must lie in (-1, 1)")
        if not 0 < self.affected_fraction <= 1:
            raise ConfigError("affected_fraction must lie in (0, 1]")
        _check_time(self.change_time_tau, self.horizon)
        if self.affected is not None and (len(set(self.affected)) != len(self.affected)
                                          or not all(0 <= i < self.d for i in self.affected)):
            raise ConfigError("affected indices must be distinct and within 0..d-1")
        m = self.block_size
        # smallest eigenvalues of the block: sigma^2 (1 - rho) and sigma^2 (1 + (m - 1) rho)
        if 1 + (m - 1) * self.rho <= 0:
            raise ConfigError(f"rho={self.rho} makes the post-change covariance indefinite for block size {m}")

    @property
    def block_size(self) -> int:
        if self.affected is not None:
            return len(self.affected)
        return max(1, int(round(self.affected_fraction * self.d)))

    def affected_set(self) -> tuple:
        if self.affected is not None:
            return tuple(sorted(self.affected))
        rng = make_rng(self.affected_set_seed, "affected-set")
        return tuple(sorted(int(i) for i in rng.choice(self.d, self.block_size, replace=False)))

    def post_covariance(self) -> np.ndarray:
        s2 = self.sigma ** 2
        cov = np.eye(self.d) * s2
        idx = np.array(self.affected_set())
        cov[np.ix_(idx, idx)] = self.rho * s2
        cov[idx, idx] = s2
        return cov

    def nominal_model(self) -> GaussianModel:
        return GaussianModel(np.full(self.d, self.mu), np.full(self.d, self.sigma ** 2))

    def anomaly_model(self) -> GaussianModel:
        return GaussianModel(np.full(self.d, self.mu), self.post_covariance())

    def ground_truth(self) -> GroundTruth:
        return GroundTruth(self.change_time_tau, self.affected_set(), self.horizon)


def gen_correlation_stream(sc: CorrelationScenario, seed) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(seed)
    pre = sc.change_time_tau - 1
    rows = np.empty((sc.horizon, sc.d))
    rows[:pre] = sc.nominal_model().sample(pre, rng)
    rows[pre:] = sc.anomaly_model().sample(sc.horizon - pre, rng)
    return Dataset(rows, ANOMALOUS, "correlation"), sc.ground_truth()


def correlation_training(sc: CorrelationScenario, n: int, seed, anomalous: bool = False) -> Dataset:
    model = sc.anomaly_model() if anomalous else sc.nominal_model()
    label = ANOMALOUS if anomalous else NOMINAL
    return Dataset(model.sample(n, np.random.default_rng(seed)), label,
                   "correlation-" + label)


def gen_mismatch_variant(sc: CorrelationScenario, overlap: int, seed=0) -> CorrelationScenario:
    """Scenario whose affected block keeps exactly ``overlap`` of the original indices."""
    original = sc.affected_set()
    m = len(original)
    if not 0 <= overlap <= m:
        raise ConfigError(f"overlap must lie in 0..{m}")
    outside = sorted(set(range(sc.d)) - set(original))
    if m - overlap > len(outside):
        raise ConfigError(f"only {len(outside)} unaffected dimensions to draw {m - overlap} new ones from")
    if overlap == m:
        return sc
    rng = make_rng(seed, "mismatch")
    kept = rng.choice(original, overlap, replace=False) if overlap else np.array([], dtype=int)
    fresh = rng.choice(outside, m - overlap, replace=False)
    return sc.replace(affected=tuple(sorted(int(i) for i in np.concatenate([kept, fresh]))))


# ---------------------------------------------------------------------------
# DDoS

@dataclass(frozen=True)
class DdosScenario(_JsonMixin):
    """IoT network of ``d`` devices with Gaussian data rates.

    A ``bimodal_fraction`` of devices switch between an inactive and an
    active mean with equal probability, independently at every time step;
    the rest have one mean.  The network layout comes from
    ``network_seed``; ``compromised_set`` defaults to ``n_compromised``
    devices drawn from the same seed.  From ``change_time_tau`` on the
    compromised devices add ``attack_shift_sigmas`` standard deviations.
    """

    d: int = 50
    bimodal_fraction: float = 0.3
    inactive_mean_range: tuple = (10.0, 50.0)
    active_mean_range: tuple = (50.0, 90.0)
    single_mean_range: tuple = (10.0, 100.0)
    sigma2: float = 5.0
    attack_shift_sigmas: float = 5.0
    compromised_set: tuple | None = None
    n_compromised: int = 10
    change_time_tau: int = 101
    horizon: int = 150
    network_seed: int = 0

    kind = "ddos"

    def __post_init__(self):
        for name in ("inactive_mean_range", "active_mean_range", "single_mean_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be ordered")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 0 <= self.bimodal_fraction <= 1:
            raise ConfigError("bimodal_fraction must lie in [0, 1]")
        if not self.sigma2 > 0:
            raise ConfigError("sigma2 must be positive")
        _check_time(self.change_time_tau, self.horizon)
        if self.compromised_set is None:
            if not 0 <= self.n_compromised <= self.d:
                raise ConfigError("n_compromised must lie in 0..d")
            rng = make_rng(self.network_seed, "compromised")
            chosen = rng.choice(self.d, self.n_compromised, replace=False)
            object.__setattr__(self, "compromised_set", tuple(sorted(int(i) for i in chosen)))
        else:
            comp = tuple(sorted(set(int(i) for i in self.compromised_set)))
            if not all(0 <= i < self.d for i in comp):
                raise ConfigError("compromised_set must be a subset of 0..d-1")
            object.__setattr__(self, "compromised_set", comp)
            object.__setattr__(self, "n_compromised", len(comp))

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))

    def layout(self):
        """(bimodal mask, low means, high means); single-mode devices have low == high."""
        rng = make_rng(self.network_seed, "ddos-network")
        n_bi = int(round(self.bimodal_fraction * self.d))
        bimodal = np.zeros(self.d, dtype=bool)
        bimodal[rng.choice(self.d, n_bi, replace=False)] = True
        single = rng.uniform(*self.single_mean_range, self.d)
        low = np.where(bimodal, rng.uniform(*self.inactive_mean_range, self.d), single)
        high = np.where(bimodal, rng.uniform(*self.active_mean_range, self.d), single)
        return bimodal, low, high

    def ground_truth(self) -> GroundTruth:
        return GroundTruth(self.change_time_tau, self.compromised_set, self.horizon)

    def device_groups(self) -> list:
        return [range(i, i + 1) for i in range(self.d)]


def _ddos_rows(sc: DdosScenario, n: int, rng: np.random.Generator, attacked: np.ndarray) -> np.ndarray:
    bimodal, low, high = sc.layout()
    active = rng.random((n, sc.d)) < 0.5
    means = np.where(bimodal & active, high, low)
    rows = means + sc.sigma * rng.standard_normal((n, sc.d))
    if attacked.any():
        shift = np.zeros(sc.d)
        shift[list(sc.compromised_set)] = sc.attack_shift_sigmas * sc.sigma
        rows[attacked] += shift
    return rows


def gen_ddos_stream(sc: DdosScenario, seed) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(seed)
    attacked = np.arange(1, sc.horizon + 1) >= sc.change_time_tau
    return Dataset(_ddos_rows(sc, sc.horizon, rng, attacked), ANOMALOUS, "ddos"), sc.ground_truth()


def ddos_training(sc: DdosScenario, n: int, seed, anomalous: bool = False) -> Dataset:
    rng = np.random.default_rng(seed)
    rows = _ddos_rows(sc, n, rng, np.full(n, anomalous))
    label = ANOMALOUS if anomalous else NOMINAL
    return Dataset(rows, label, "ddos-" + label)


# ---------------------------------------------------------------------------
# dispatch and files

SCENARIO_TYPES = {"correlation": CorrelationScenario, "ddos": DdosScenario}


def scenario_from_dict(data: dict):
    kind = data.get("kind")
    if kind not in SCENARIO_TYPES:
        raise ConfigError(f"unknown scenario kind {kind!r}")
    return SCENARIO_TYPES[kind].from_dict(data)


def load_scenario(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return scenario_from_dict(data)


def generate_stream(sc, seed) -> tuple[Dataset, GroundTruth]:
    if isinstance(sc, CorrelationScenario):
        return gen_correlation_stream(sc, seed)
    if isinstance(sc, DdosScenario):
        return gen_ddos_stream(sc, seed)
    raise ConfigError(f"unsupported scenario {type(sc).__name__}")


def generate_training(sc, n: int, seed, anomalous: bool = False) -> Dataset:
    if isinstance(sc, CorrelationScenario):
        return correlation_training(sc, n, seed, anomalous)
    if isinstance(sc, DdosScenario):
        return ddos_training(sc, n, seed, anomalous)
    raise ConfigError(f"unsupported scenario {type(sc).__name__}")


def save_stream(data: Dataset, truth: GroundTruth, csv_path) -> Path:
    """Write the stream CSV and a ``.truth.json`` sidecar; returns the sidecar path."""
    csv_path = Path(csv_path)
    save_csv(data, csv_path)
    sidecar = csv_path.with_suffix(".truth.json")
    sidecar.write_text(json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n")
    return sidecar


def load_ground_truth(path) -> GroundTruth:
    return GroundTruth.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# N-BaIoT format

def sample_device_rows(path, n: int, seed, has_header: bool = True, label: str = NOMINAL) -> Dataset:
    """Uniformly sample ``n`` rows without replacement from one device CSV."""
    data = load_csv(path, has_header=has_header, label=label)
    if n > len(data):
        raise DataError(f"{path}: asked for {n} rows, file has {len(data)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(data), n, replace=False))
    return data.subset(idx)


def stack_device_csvs(paths, n: int, seed, has_header: bool = True, label: str = NOMINAL) -> Dataset:
    """Build stacked observations (one block of columns per device)."""
    parts = [sample_device_rows(p, n, (seed, i), has_header, label) for i, p in enumerate(paths)]
    return stack_devices(parts, "stacked")


def nbaiot_stream(benign_paths, attack_paths: dict, tau: int, horizon: int, seed,
                  has_header: bool = True) -> tuple[Dataset, GroundTruth]:
    """Stacked stream where the devices in ``attack_paths`` switch to their
    attack traffic at ``tau``.  Ground truth lists the attacked devices
    (device indices, not columns)."""
    _check_time(tau, horizon)
    pre, post = tau - 1, horizon - tau + 1
    blocks = []
    for i, path in enumerate(benign_paths):
        before = sample_device_rows(path, horizon, (seed, i), has_header).rows
        if i in attack_paths:
            after = sample_device_rows(attack_paths[i], post, (seed, i, 1), has_header, ANOMALOUS).rows
            before = np.vstack([before[:pre], after])
        blocks.append(before)
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise DataError("device CSVs have different feature counts")
    return (Dataset(np.hstack(blocks), ANOMALOUS, "nbaiot"),
            GroundTruth(tau, tuple(sorted(attack_paths)), horizon))
