"""Command-line entry point: ``odit {train,detect,simulate,eval,bench}``.

Exit status: 0 on success (or no alarm), 2 when ``detect`` raises an
alarm, 1 on any error, including usage errors.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .core import ConfigError, DataError, DetectorConfig, iter_csv_rows, load_csv
from .detectors import EventLogWriter, build_odit2, run_detector, run_odit_uni, train_odit
from .evaluation import Experiment, run_experiment, timing_benchmark
from .localization import LocalizationConfig, localize, write_report_csv
from .scenarios import generate_stream, load_scenario, save_stream

EXIT_OK, EXIT_ERROR, EXIT_ALARM = 0, 1, 2
MODEL_FORMAT = "odit-model/1"
BUNDLED = ("ddos_repro", "correlation_repro")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, command: str, args, inputs, outputs) -> Path:
    manifest = {
        "command": command,
        "config_path": None if args.config is None else str(Path(args.config).resolve()),
        "inputs": [str(Path(p).resolve()) for p in inputs],
        "outputs": [str(Path(p).resolve()) for p in outputs],
        "master_seed": args.seed,
        "jobs": args.jobs,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "tool_version": __version__,
    }
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# model files

def _load_config(args) -> DetectorConfig:
    cfg = DetectorConfig.load(args.config) if args.config else DetectorConfig()
    if args.seed is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    return cfg


def model_to_dict(model, csv_path, has_header: bool, knn: dict) -> dict:
    part = model.partition
    return {
        "format": MODEL_FORMAT,
        "nominal_csv": str(Path(csv_path).resolve()),
        "nominal_sha256": sha256_file(csv_path),
        "has_header": has_header,
        "config": model.config.to_dict(),
        "backend": model.backend,
        "knn": knn,
        "partition": {"ratio": part.ratio, "index1": part.index1.tolist(), "index2": part.index2.tolist()},
        "K": model.K,
        "borderline_LK": model.borderline_LK,
        "floor_L": model.floor_L,
    }


def load_model(path):
    """Rebuild a trained model from its file, checking the data hash and
    that retraining reproduces the stored partition and borderline distance."""
    try:
        spec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None
    if spec.get("format") != MODEL_FORMAT:
        raise DataError(f"{path}: not a model file")
    csv_path = spec["nominal_csv"]
    if sha256_file(csv_path) != spec["nominal_sha256"]:
        raise DataError(f"{csv_path}: content hash differs from the one recorded at training")
    nominal = load_csv(csv_path, has_header=spec["has_header"])
    cfg = DetectorConfig.from_dict(spec["config"])
    knn = spec.get("knn", {})
    model = train_odit(nominal, cfg, spec["backend"], C=knn.get("C", 100), Imax=knn.get("Imax", 10),
                       B=knn.get("B", 1000))
    if (model.partition.index1.tolist() != spec["partition"]["index1"] or model.K != spec["K"]
            or model.borderline_LK != spec["borderline_LK"]):
        raise DataError(f"{path}: retraining does not reproduce the stored model")
    return model


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = _load_config(args)
    nominal = load_csv(args.nominal_csv, has_header=args.header)
    knn = {"C": args.C, "Imax": args.Imax, "B": args.B}
    model = train_odit(nominal, cfg, args.backend, **knn)
    out = Path(args.out)
    out.write_text(json.dumps(model_to_dict(model, args.nominal_csv, args.header, knn), sort_keys=True) + "\n")
    write_manifest(out.with_suffix(".manifest.json"), "train", args, [args.nominal_csv], [out])
    print(f"trained: N1={len(model.partition.part1)} N2={model.reference_size} K={model.K} "
          f"L_K={model.borderline_LK!r}")
    return EXIT_OK


def _stream(args, dim):
    for row in iter_csv_rows(args.stream_csv, has_header=args.header):
        if row.shape[0] != dim:
            raise DataError(f"{args.stream_csv}: stream has {row.shape[0]} columns, model expects {dim}")
        yield row


def cmd_detect(args) -> int:
    model = load_model(args.model)
    outputs = []
    odit2 = None
    if args.variant in ("odit2", "uni"):
        if not args.anomaly_csv:
            raise ConfigError(f"--variant {args.variant} needs --anomaly-csv")
        raw = load_csv(args.anomaly_csv, has_header=args.header, label="anomalous")
        cleaner = model.with_alpha(args.alpha2) if args.alpha2 is not None else model
        odit2 = build_odit2(cleaner, raw, clean=not args.no_clean)
    if args.variant == "uni":
        if args.h2 is None:
            raise ConfigError("--variant uni needs --h2")
        s1, s2, _ = run_odit_uni(model, odit2, _stream(args, model.dim), args.h, args.h2, record=True)
        if args.event_log:
            with EventLogWriter(args.event_log, extra=("D2_t", "Delta2_t")) as log:
                for r1, r2 in zip(s1.evidence_log, s2.evidence_log):
                    flag = int((s1.alarm and r1.t >= s1.alarm_time_T) or (s2.alarm and r2.t >= s2.alarm_time_T))
                    log.row(r1.t, r1.D, r1.delta, flag, r2.D, r2.delta)
            outputs.append(args.event_log)
        write_manifest(_manifest_path(args), "detect", args, [args.model, args.stream_csv], outputs)
        if s2.alarm:
            print(f"alarm at t={s2.alarm_time_T} by odit2 (tau_hat={s2.tau_hat})")
        elif s1.alarm:
            print(f"alarm at t={s1.alarm_time_T} by odit (tau_hat={s1.tau_hat}); anomaly reference augmented")
        else:
            print(f"no alarm in {s1.t} samples")
        return EXIT_ALARM if (s1.alarm or s2.alarm) else EXIT_OK
    det = odit2 if args.variant == "odit2" else model
    S = args.localize[0] if args.localize else 0
    log = EventLogWriter(args.event_log) if args.event_log else None
    try:
        state = run_detector(det, _stream(args, model.dim), args.h, localize_samples=int(S),
                             record=bool(S), on_event=log, chunk_size=64)
    finally:
        if log is not None:
            log.close()
            outputs.append(args.event_log)
    if not state.alarm:
        print(f"no alarm in {state.t} samples")
        write_manifest(_manifest_path(args), "detect", args, [args.model, args.stream_csv], outputs)
        return EXIT_OK
    print(f"alarm at t={state.alarm_time_T} (tau_hat={state.tau_hat})")
    if S:
        cfg = LocalizationConfig(S=int(S), beta=float(args.localize[1]))
        report = localize(det, state, cfg)
        print("flagged dimensions: " + (" ".join(map(str, report.flagged)) or "none"))
        if args.report:
            write_report_csv(report, args.report)
            outputs.append(args.report)
    write_manifest(_manifest_path(args), "detect", args, [args.model, args.stream_csv], outputs)
    return EXIT_ALARM


def _manifest_path(args) -> Path:
    base = args.event_log or args.report or args.model
    return Path(base).with_suffix(".detect.manifest.json")


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario_json)
    seed = 0 if args.seed is None else args.seed
    data, truth = generate_stream(sc, seed)
    sidecar = save_stream(data, truth, args.out)
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "simulate", args, [args.scenario_json],
                   [args.out, sidecar])
    print(f"wrote {len(data)}x{data.dim} stream, tau={truth.tau}, {len(truth.affected)} affected")
    return EXIT_OK


def load_experiment(ref) -> Experiment:
    if ref in BUNDLED and not Path(ref).exists():
        text = resources.files("odit").joinpath("experiments", f"{ref}.json").read_text()
        return Experiment.from_dict(json.loads(text))
    return Experiment.load(ref)


def cmd_eval(args) -> int:
    exp = load_experiment(args.experiment)
    seed = 0 if args.seed is None else args.seed
    out = Path(args.outdir)
    res = run_experiment(exp, seed, jobs=args.jobs, outdir=out, n_trials=args.trials)
    outputs = sorted(str(p) for p in out.iterdir() if p.suffix in (".csv", ".json") and "manifest" not in p.name)
    write_manifest(out / "manifest.json", "eval", args, [args.experiment], outputs)
    for name, report in res["reports"].items():
        row = report.at_far(args.far)
        if row is None:
            print(f"{name}: no threshold reaches FAR <= {args.far}")
        else:
            delay = "n/a" if row.mean_delay is None else f"{row.mean_delay:.3f}"
            print(f"{name}: h={row.h:.4g} mean_delay={delay} far={row.far:.4f} censored={row.censored}/{row.n_trials}")
    return EXIT_OK


def cmd_bench(args) -> int:
    seed = 0 if args.seed is None else args.seed
    res = timing_benchmark(args.backend, args.N2, args.d, args.queries, seed=seed, C=args.C, Imax=args.Imax,
                           B=args.B)
    print(f"{res.backend}: N2={res.N2} d={res.d} per-sample {res.per_sample_seconds:.6f} s")
    if args.out:
        Path(args.out).write_text("backend,N2,d,n_queries,per_sample_seconds\n"
                                  f"{res.backend},{res.N2},{res.d},{res.n_queries},{res.per_sample_seconds!r}\n")
        write_manifest(Path(args.out).with_suffix(".manifest.json"), "bench", args, [], [args.out])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _knn_flags(p):
    p.add_argument("--backend", choices=("exact", "approximate"), default="exact")
    p.add_argument("--C", type=int, default=100, help="k-means tree branching factor")
    p.add_argument("--Imax", type=int, default=10, help="k-means iterations per node")
    p.add_argument("--B", type=int, default=1000, help="points examined per approximate query")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="odit", description="kNN-based sequential anomaly detection and localization")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for eval")
    parser.add_argument("--config", default=None, help="detector config JSON")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a nominal model")
    p.add_argument("nominal_csv")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--header", action="store_true", help="CSV has a header row")
    _knn_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="stream a CSV through a trained model")
    p.add_argument("model")
    p.add_argument("stream_csv")
    p.add_argument("--h", type=float, required=True, help="alarm threshold")
    p.add_argument("--variant", choices=("odit", "odit2", "uni"), default="odit")
    p.add_argument("--h2", type=float, default=None, help="odit2 threshold for --variant uni")
    p.add_argument("--anomaly-csv", default=None)
    p.add_argument("--alpha2", type=float, default=None, help="significance level for anomaly-set cleaning")
    p.add_argument("--no-clean", action="store_true")
    p.add_argument("--localize", nargs=2, metavar=("S", "BETA"), type=float, default=None)
    p.add_argument("--event-log", default=None)
    p.add_argument("--report", default=None, help="localization report CSV")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("simulate", help="generate a scenario stream")
    p.add_argument("scenario_json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="run a Monte-Carlo experiment")
    p.add_argument("experiment", help="experiment JSON or bundled name (" + ", ".join(BUNDLED) + ")")
    p.add_argument("--outdir", required=True)
    p.add_argument("--trials", type=int, default=None, help="override n_trials")
    p.add_argument("--far", type=float, default=0.01, help="false alarm rate for the summary lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time per-sample evidence computation")
    p.add_argument("--N2", type=int, default=100000)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--out", default=None)
    _knn_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.jobs < 1:
        print("odit: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except (DataError, ConfigError, OSError, KeyError) as exc:
        print(f"odit: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
