"""Monte-Carlo evaluation: detection delay, false alarms, localization ROC
and timing.

Trials use common random numbers: each trial draws one stream from its own
sub-seed, every detector computes its full statistic path on it once, and
the alarm time for each threshold ``h`` is the first ``t`` at which the path
reaches ``h``.  That is the same alarm time a detector restarted per ``h``
would produce, since the statistic does not depend on ``h``.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import DataFilter, GCusum, InfoMetricDetector, OracleCusum, WindowDetectorConfig
from .core import ConfigError, DataError, DetectorConfig, derive_seed
from .detectors import build_odit2, run_detector, statistic_path, train_odit
from .localization import InsufficientSamples, LocalizationConfig, localize, student_t_threshold
from .scenarios import (CorrelationScenario, DdosScenario, generate_stream, generate_training,
                        scenario_from_dict)


# ---------------------------------------------------------------------------
# outcomes

@dataclass(frozen=True)
class TrialOutcome:
    alarm_time: int | None
    true_tau: int

    @property
    def false_alarm(self) -> bool:
        return self.alarm_time is not None and self.alarm_time < self.true_tau

    @property
    def detected(self) -> bool:
        return self.alarm_time is not None and self.alarm_time >= self.true_tau

    @property
    def censored(self) -> bool:
        return self.alarm_time is None

    @property
    def detection_delay(self) -> int | None:
        return self.alarm_time - self.true_tau if self.detected else None


def first_crossing(path: np.ndarray, h: float) -> int | None:
    """1-based time of the first ``path[t] >= h``, or None."""
    hits = np.flatnonzero(np.asarray(path) >= h)
    return int(hits[0]) + 1 if hits.size else None


def outcomes_from_path(path, tau: int, thresholds) -> list[TrialOutcome]:
    return [TrialOutcome(first_crossing(path, h), tau) for h in thresholds]


@dataclass(frozen=True)
class ReportRow:
    h: float
    mean_delay: float | None
    far: float
    censored: int
    n_trials: int

    @property
    def detections(self) -> int:
        return self.n_trials - self.censored - int(round(self.far * self.n_trials))


def summarize(outcomes: list[TrialOutcome], h: float) -> ReportRow:
    """Aggregate one threshold's outcomes.

    Delays are averaged over true detections only; censored trials (no
    alarm by the horizon) are counted, not averaged.
    """
    n = len(outcomes)
    if n == 0:
        raise DataError("no trials to summarize")
    delays = [o.detection_delay for o in outcomes if o.detected]
    return ReportRow(float(h), float(np.mean(delays)) if delays else None,
                     sum(o.false_alarm for o in outcomes) / n,
                     sum(o.censored for o in outcomes), n)


@dataclass
class EvalReport:
    detector: str
    rows: list
    roc: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def at_far(self, far: float) -> ReportRow | None:
        """Lowest-threshold row whose false alarm rate is at most ``far``."""
        ok = [r for r in self.rows if r.far <= far]
        return min(ok, key=lambda r: r.h) if ok else None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["h", "mean_delay", "far", "censored", "n_trials"])
            for r in self.rows:
                w.writerow([repr(r.h), "" if r.mean_delay is None else repr(r.mean_delay),
                            repr(r.far), r.censored, r.n_trials])


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["operating_point", "fpr", "tpr"])
        for op, fpr, tpr in points:
            w.writerow([repr(float(op)), repr(float(fpr)), repr(float(tpr))])


# ---------------------------------------------------------------------------
# ROC helpers

def roc_points(scores: np.ndarray, labels: np.ndarray, operating_points=None):
    """(operating point, FPR, TPR) triples for "flag iff score >= c".

    Without explicit operating points every distinct score is used, plus
    +inf so the curve starts at (0, 0).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in shape")
    pos, neg = labels.sum(), (~labels).sum()
    if pos == 0 or neg == 0:
        raise DataError("ROC needs both positive and negative dimensions")
    if operating_points is None:
        finite = np.unique(scores[np.isfinite(scores)])
        operating_points = np.concatenate([[np.inf], finite[::-1], [-np.inf]])
    out = []
    for c in operating_points:
        flags = scores >= c
        out.append((float(c), float((flags & ~labels).sum() / neg), float((flags & labels).sum() / pos)))
    return out


def roc_auc(points) -> float:
    pts = sorted({(fpr, tpr) for _, fpr, tpr in points} | {(0.0, 0.0), (1.0, 1.0)})
    # keep the upper envelope at each FPR
    fprs = np.array(sorted({p[0] for p in pts}))
    tprs = np.array([max(t for f, t in pts if f == x) for x in fprs])
    return float(np.sum(np.diff(fprs) * (tprs[1:] + tprs[:-1]) / 2.0))


def tpr_at_fpr(points, fpr: float) -> float:
    ok = [tpr for _, f, tpr in points if f <= fpr + 1e-12]
    return max(ok) if ok else 0.0


# ---------------------------------------------------------------------------
# experiment definitions

def _thresholds(spec) -> list[float]:
    if isinstance(spec, dict):
        if "logspace" in spec:
            lo, hi, num = spec["logspace"]
            return [float(v) for v in np.logspace(math.log10(lo), math.log10(hi), int(num))]
        if "linspace" in spec:
            lo, hi, num = spec["linspace"]
            return [float(v) for v in np.linspace(lo, hi, int(num))]
        raise ConfigError(f"unknown threshold grid {spec}")
    values = [float(v) for v in spec]
    if not values or any(not v > 0 for v in values):
        raise ConfigError("thresholds must be a non-empty list of positive numbers")
    return sorted(values)


DETECTOR_TYPES = ("odit", "odit2", "oracle_cusum", "gcusum", "info_metric")


@dataclass
class Experiment:
    """Parsed experiment file: scenario, training sizes, detectors."""

    name: str
    scenario: object
    n_nominal: int
    n_anomalous: int
    n_trials: int
    detectors: list
    localization: dict | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "Experiment":
        data = copy.deepcopy(data)
        raw = copy.deepcopy(data)
        try:
            scenario = scenario_from_dict(data["scenario"])
            training = data.get("training", {})
            dets = data["detectors"]
        except KeyError as exc:
            raise ConfigError(f"experiment is missing {exc}") from None
        names = set()
        for det in dets:
            if det.get("type") not in DETECTOR_TYPES:
                raise ConfigError(f"unknown detector type {det.get('type')!r}")
            det.setdefault("name", det["type"])
            if det["name"] in names:
                raise ConfigError(f"duplicate detector name {det['name']!r}")
            names.add(det["name"])
            det["thresholds"] = _thresholds(det.get("thresholds", [1.0]))
        loc = data.get("localization")
        if loc is not None:
            for name in loc.get("detectors", []):
                if name not in names:
                    raise ConfigError(f"localization refers to unknown detector {name!r}")
        n_trials = int(data.get("n_trials", 100))
        if n_trials < 1:
            raise ConfigError("n_trials must be at least 1")
        return cls(data.get("name", "experiment"), scenario, int(training.get("n_nominal", 20000)),
                   int(training.get("n_anomalous", 0)), n_trials, dets, loc, raw)

    @classmethod
    def load(cls, path) -> "Experiment":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data)


def _odit_config(det: dict, seed: int) -> DetectorConfig:
    cfg = dict(det.get("config", {}))
    cfg.setdefault("rng_seed", seed)
    return DetectorConfig.from_dict(cfg)


def build_detectors(exp: Experiment, master_seed: int) -> dict:
    """Train every detector of an experiment; returns name -> path detector."""
    sc = exp.scenario
    nominal = generate_training(sc, exp.n_nominal, derive_seed(master_seed, "train-nominal"))
    anomalous = None
    models = {}
    cache = {}
    for det in exp.detectors:
        kind = det["type"]
        if kind in ("odit", "odit2"):
            cfg = _odit_config(det, derive_seed(master_seed, "partition"))
            key = (cfg.replace(alpha=0.05), det.get("backend", "exact"))
            if key not in cache:
                cache[key] = train_odit(nominal, cfg, det.get("backend", "exact"),
                                        C=det.get("C", 100), Imax=det.get("Imax", 10), B=det.get("B", 1000))
            base = cache[key].with_alpha(cfg.alpha)
            if kind == "odit":
                models[det["name"]] = base
            else:
                if anomalous is None:
                    if exp.n_anomalous < 1:
                        raise ConfigError("odit2 needs training.n_anomalous > 0")
                    anomalous = generate_training(sc, exp.n_anomalous, derive_seed(master_seed, "train-anomalous"),
                                                  anomalous=True)
                cleaner = base.with_alpha(det.get("alpha2", cfg.alpha))
                models[det["name"]] = build_odit2(cleaner, anomalous, clean=det.get("clean", True))
        elif kind == "oracle_cusum":
            models[det["name"]] = OracleCusum(sc.nominal_model(), sc.anomaly_model())
        elif kind == "gcusum":
            models[det["name"]] = GCusum.fit(nominal, det.get("assumed_shift", 3.0))
        elif kind == "info_metric":
            wcfg = WindowDetectorConfig(det.get("window_W", 5), det.get("renyi_alpha", 0.5),
                                        det.get("support_sigmas", 10.0))
            models[det["name"]] = InfoMetricDetector.fit(nominal, wcfg)
    return {"models": models, "nominal": nominal}


def detector_path(model, X) -> np.ndarray:
    if hasattr(model, "path"):
        return model.path(X)
    return statistic_path(model, X)


# ---------------------------------------------------------------------------
# parallel trial execution

_CONTEXT: dict = {}


def _map(fn, items, jobs: int):
    """Ordered map; with jobs > 1 the work is spread over forked workers
    that inherit ``_CONTEXT``.  Results do not depend on ``jobs``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    try:
        ctx = mp.get_context("fork")
    except ValueError:
        return [fn(i) for i in items]
    chunk = max(1, len(items) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def trial_seed(master_seed: int, i: int, label: str = "trial") -> int:
    return derive_seed(master_seed, label, i)


def _trial_paths(i: int):
    ctx = _CONTEXT
    X, truth = generate_stream(ctx["scenario"], trial_seed(ctx["seed"], i))
    return {name: detector_path(m, X.rows) for name, m in ctx["models"].items()}, truth.tau


def run_trials(models: dict, scenario, thresholds: dict, n_trials: int, master_seed: int = 0,
               jobs: int = 1) -> dict:
    """Per-detector :class:`EvalReport` over ``n_trials`` fresh streams.

    ``models`` maps names to trained detectors, ``thresholds`` maps the same
    names to lists of ``h``.  Deterministic given ``master_seed`` for any
    ``jobs``.
    """
    if n_trials < 1:
        raise ConfigError("n_trials must be at least 1")
    _CONTEXT.clear()
    _CONTEXT.update(scenario=scenario, models=models, seed=master_seed)
    try:
        results = _map(_trial_paths, range(n_trials), jobs)
    finally:
        _CONTEXT.clear()
    reports = {}
    for name in models:
        hs = thresholds[name]
        per_h = [[] for _ in hs]
        for paths, tau in results:
            for j, o in enumerate(outcomes_from_path(paths[name], tau, hs)):
                per_h[j].append(o)
        reports[name] = EvalReport(name, [summarize(o, h) for o, h in zip(per_h, hs)])
    return reports


def false_alarm_period(model, scenario, h: float, n_trials: int, master_seed: int = 0) -> tuple[float, int]:
    """Mean time to a (false) alarm on pure-nominal streams, censored at the
    horizon; returns (mean over trials with censoring at horizon, censored count)."""
    times, censored = [], 0
    for i in range(n_trials):
        X = generate_training(scenario, scenario.horizon, trial_seed(master_seed, i, "nominal-run"))
        t = first_crossing(detector_path(model, X.rows), h)
        if t is None:
            censored += 1
            t = scenario.horizon
        times.append(t)
    return float(np.mean(times)), censored


# ---------------------------------------------------------------------------
# localization ROC

def _trial_localization(i: int):
    ctx = _CONTEXT
    X, truth = generate_stream(ctx["scenario"], trial_seed(ctx["seed"], i))
    d = X.dim
    mask = truth.mask(d)
    out = {}
    for name, (model, h) in ctx["loc_models"].items():
        t_stats = np.full(d, -np.inf)
        excess = np.full(d, -np.inf)
        state = run_detector(model, X.rows, h, localize_samples=ctx["S"])
        if state.alarm:
            try:
                rep = localize(model, state, ctx["loc_cfg"], mu=ctx["mu"][name])
                t_stats = rep.t_stats
                excess = rep.samples.mean(axis=0) - rep.mu_baseline
            except InsufficientSamples:
                pass
        out[name] = (t_stats, excess)
    if ctx.get("filter") is not None:
        # the rate filter sees the first S samples from the true onset
        start = truth.tau - 1
        window = X.rows[start:start + ctx["S"]].mean(axis=0)
        out["data_filter"] = (None, ctx["filter"].scores(window))
    return out, mask


class WindowRateFilter:
    """Data filter on the mean rate over an S-sample window.

    ``scores`` maps each node's window mean to its nominal CDF level, so
    "flag iff score > q" is the filter with per-node thresholds at the
    nominal q-quantile of S-sample mean rates.
    """

    def __init__(self, nominal_rows: np.ndarray, S: int):
        n = (nominal_rows.shape[0] // S) * S
        means = nominal_rows[:n].reshape(-1, S, nominal_rows.shape[1]).mean(axis=1)
        self.sorted = np.sort(means, axis=0)

    def scores(self, window_mean: np.ndarray) -> np.ndarray:
        n = self.sorted.shape[0]
        return np.array([np.searchsorted(self.sorted[:, i], v, side="left") / n
                         for i, v in enumerate(window_mean)])

    def filter_at(self, q: float) -> DataFilter:
        return DataFilter(np.quantile(self.sorted, q, axis=0))


def localization_roc(models: dict, scenario, h: dict, n_trials: int, master_seed: int = 0, S: int = 2,
                     beta_grid=None, nominal_rows: np.ndarray | None = None, jobs: int = 1) -> dict:
    """Localization ROC curves over ``n_trials`` streams.

    For each detector two sweeps are returned: ``"beta"`` runs the t-test
    at every significance level of ``beta_grid`` and ``"threshold"`` sweeps
    a threshold on the mean contribution excess over the nominal baseline.
    With ``nominal_rows`` the windowed rate filter is added as
    ``"data_filter"``.  A detector that raises no alarm in a trial flags
    nothing.
    """
    from .localization import nominal_baseline
    if beta_grid is None:
        beta_grid = np.concatenate([np.logspace(-6, -1, 26), np.linspace(0.12, 0.99, 30)])
    mu = {name: nominal_baseline(m) for name, m in models.items()}
    _CONTEXT.clear()
    _CONTEXT.update(scenario=scenario, seed=master_seed, S=S, loc_cfg=LocalizationConfig(S=S),
                    loc_models={n: (m, h[n]) for n, m in models.items()}, mu=mu,
                    filter=None if nominal_rows is None else WindowRateFilter(nominal_rows, S))
    try:
        results = _map(_trial_localization, range(n_trials), jobs)
    finally:
        _CONTEXT.clear()
    masks = np.array([m for _, m in results])
    curves = {}
    for name in models:
        T = np.array([r[name][0] for r, _ in results])
        E = np.array([r[name][1] for r, _ in results])
        betas = sorted(float(b) for b in beta_grid)
        thetas = [student_t_threshold(b, S - 1) for b in betas]
        # zero-spread dimensions carry +/-inf statistics, flagged at every
        # level iff their mean exceeds the baseline
        pts = roc_points(T, masks, thetas)
        curves[name] = {"beta": [(b, f, t) for b, (_, f, t) in zip(betas, pts)],
                        "threshold": roc_points(E, masks)}
    if nominal_rows is not None:
        F = np.array([r["data_filter"][1] for r, _ in results])
        curves["data_filter"] = {"threshold": roc_points(F, masks)}
    return curves


# ---------------------------------------------------------------------------
# timing

@dataclass(frozen=True)
class TimingResult:
    backend: str
    N2: int
    d: int
    n_queries: int
    per_sample_seconds: float


def timing_benchmark(backend: str, N2: int, d: int, n_queries: int, *, seed: int = 0, C: int = 100,
                     Imax: int = 10, B: int = 1000, model=None, queries: np.ndarray | None = None,
                     repeats: int = 1) -> TimingResult:
    """Mean wall-clock seconds per observation for evidence + statistic update.

    Observations are processed one at a time, as in online operation.  A
    standard Gaussian nominal model is trained unless ``model`` is given.
    """
    from .core import Dataset
    from .detectors import DetectorState, update_statistic
    rng = np.random.default_rng(seed)
    if model is None:
        n = int(math.ceil(N2 / 0.62))
        nominal = Dataset(rng.standard_normal((n, d)))
        model = train_odit(nominal, DetectorConfig(rng_seed=seed), backend, C=C, Imax=Imax, B=B)
    if queries is None:
        queries = rng.standard_normal((n_queries, d))
    model.evidence(queries[:1])  # warm-up
    best = math.inf
    for _ in range(repeats):
        state = DetectorState()
        start = time.perf_counter()
        for x in queries:
            D, _ = model.evidence(x[None, :])
            update_statistic(state, D[0], math.inf)
        best = min(best, (time.perf_counter() - start) / len(queries))
    return TimingResult(model.backend, model.reference_size, model.dim, len(queries), best)


def effective_delay(sample_delay: float, sampling_period: float, per_sample_overhead: float) -> float:
    """Wall-clock delay: samples of delay times the sampling period, plus
    the per-sample computation time."""
    if sample_delay < 0 or sampling_period < 0 or per_sample_overhead < 0:
        raise DataError("inputs must be non-negative")
    return sample_delay * sampling_period + per_sample_overhead


def delay_regime(sampling_period: float, per_sample_overhead: float) -> str:
    """"real-time" when each sample is processed before the next arrives,
    otherwise "missed-samples" (the detector falls behind the stream)."""
    return "real-time" if per_sample_overhead <= sampling_period else "missed-samples"


# ---------------------------------------------------------------------------
# whole experiments

def run_experiment(exp: Experiment, master_seed: int = 0, jobs: int = 1, outdir=None,
                   n_trials: int | None = None) -> dict:
    """Train, evaluate and optionally localize; writes CSVs when ``outdir`` is set."""
    n = exp.n_trials if n_trials is None else n_trials
    built = build_detectors(exp, master_seed)
    models = built["models"]
    thresholds = {d["name"]: d["thresholds"] for d in exp.detectors}
    reports = run_trials(models, exp.scenario, thresholds, n, master_seed, jobs)
    curves = {}
    loc = exp.localization
    if loc:
        far = float(loc.get("far", 0.01))
        names = loc.get("detectors", [])
        h = {}
        for name in names:
            row = reports[name].at_far(far)
            h[name] = row.h if row is not None else max(thresholds[name])
        loc_models = {name: models[name] for name in names}
        curves = localization_roc(loc_models, exp.scenario, h, int(loc.get("n_trials", n)), master_seed,
                                  int(loc.get("S", 2)),
                                  nominal_rows=built["nominal"].rows if loc.get("filter", True) else None,
                                  jobs=jobs)
    meta = {"experiment": exp.raw, "master_seed": master_seed, "n_trials": n,
            "delay_convention": "mean over true detections; censored trials counted separately"}
    for r in reports.values():
        r.metadata = meta
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        for name, r in reports.items():
            r.write_csv(out / f"eval_{name}.csv")
        for name, sweeps in curves.items():
            for sweep, pts in sweeps.items():
                write_roc_csv(pts, out / f"roc_{name}_{sweep}.csv")
        (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {"reports": reports, "roc": curves, "models": models, "metadata": meta}
