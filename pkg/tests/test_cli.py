import json

import numpy as np
import pytest

from odit.cli import main
from odit.core import save_csv


@pytest.fixture
def nominal_csv(tmp_path):
    p = tmp_path / "nominal.csv"
    save_csv(np.random.default_rng(0).standard_normal((2000, 4)), p)
    return p


def _stream(tmp_path, shift_dim=None, n=60, onset=30):
    X = np.random.default_rng(1).standard_normal((n, 4))
    if shift_dim is not None:
        X[onset:, shift_dim] += 8.0
    p = tmp_path / "stream.csv"
    save_csv(X, p)
    return p


def test_train_is_byte_identical(tmp_path, nominal_csv):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["--seed", "0", "train", str(nominal_csv), "--out", str(a)]) == 0
    assert main(["--seed", "0", "train", str(nominal_csv), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    model = json.loads(a.read_text())
    assert model["K"] == int(0.38 * 2000 * 0.95)
    assert (tmp_path / "a.manifest.json").exists()


def test_train_bad_alpha(tmp_path):
    p = tmp_path / "tiny.csv"
    save_csv(np.arange(4.0)[:, None], p)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"alpha": 0.9, "partition_ratio": 0.5}))
    assert main(["--config", str(cfg), "train", str(p), "--out", str(tmp_path / "m.json")]) == 1


def test_detect_alarm_and_localize(tmp_path, nominal_csv, capsys):
    model = tmp_path / "m.json"
    main(["train", str(nominal_csv), "--out", str(model)])
    stream = _stream(tmp_path, shift_dim=2)
    log = tmp_path / "log.csv"
    report = tmp_path / "rep.csv"
    code = main(["detect", str(model), str(stream), "--h", "30", "--localize", "3", "0.05",
                 "--event-log", str(log), "--report", str(report)])
    out = capsys.readouterr().out
    assert code == 2
    assert "alarm at t=" in out and "flagged dimensions:" in out
    assert "2" in out.split("flagged dimensions:")[1].split()
    assert log.read_text().startswith("t,D_t,Delta_t,alarm_flag")
    assert report.read_text().startswith("dimension,t_stat,flagged")


def test_detect_nominal_no_alarm(tmp_path, nominal_csv, capsys):
    model = tmp_path / "m.json"
    main(["train", str(nominal_csv), "--out", str(model)])
    log = tmp_path / "log.csv"
    code = main(["detect", str(model), str(_stream(tmp_path)), "--h", "1e9", "--event-log", str(log)])
    assert code == 0 and "no alarm in 60 samples" in capsys.readouterr().out
    assert len(log.read_text().splitlines()) == 61


def test_detect_odit2_and_uni(tmp_path, nominal_csv):
    model = tmp_path / "m.json"
    main(["train", str(nominal_csv), "--out", str(model)])
    anom = tmp_path / "anom.csv"
    A = np.random.default_rng(3).standard_normal((1000, 4))
    A[:, 2] += 8.0
    save_csv(A, anom)
    stream = _stream(tmp_path, shift_dim=2)
    assert main(["detect", str(model), str(stream), "--h", "5", "--variant", "odit2",
                 "--anomaly-csv", str(anom)]) == 2
    log = tmp_path / "uni.csv"
    assert main(["detect", str(model), str(stream), "--h", "1e6", "--h2", "5", "--variant", "uni",
                 "--anomaly-csv", str(anom), "--event-log", str(log)]) == 2
    assert log.read_text().splitlines()[0] == "t,D_t,Delta_t,alarm_flag,D2_t,Delta2_t"
    assert main(["detect", str(model), str(stream), "--h", "5", "--variant", "odit2"]) == 1


def test_detect_rejects_tampered_training_data(tmp_path, nominal_csv):
    model = tmp_path / "m.json"
    main(["train", str(nominal_csv), "--out", str(model)])
    save_csv(np.zeros((5, 4)), nominal_csv)
    assert main(["detect", str(model), str(_stream(tmp_path)), "--h", "5"]) == 1


def test_detect_dimension_mismatch(tmp_path, nominal_csv):
    model = tmp_path / "m.json"
    main(["train", str(nominal_csv), "--out", str(model)])
    bad = tmp_path / "bad.csv"
    save_csv(np.zeros((5, 3)), bad)
    assert main(["detect", str(model), str(bad), "--h", "5"]) == 1


def test_simulate_replay(tmp_path):
    sc = tmp_path / "sc.json"
    sc.write_text(json.dumps({"kind": "correlation"}))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["--seed", "4", "simulate", str(sc), "--out", str(a)]) == 0
    assert main(["--seed", "4", "simulate", str(sc), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    rows = a.read_text().splitlines()
    assert len(rows) == 200 and len(rows[0].split(",")) == 100
    assert json.loads((tmp_path / "a.truth.json").read_text())["tau"] == 100
    sc.write_text(json.dumps({"kind": "correlation", "rho": 1.0}))
    assert main(["simulate", str(sc), "--out", str(a)]) == 1


def test_usage_errors(capsys):
    assert main(["bogus"]) == 1
    assert main(["--jobs", "0", "simulate", "x", "--out", "y"]) == 1
    assert main(["--version"]) == 0


def test_eval_small(tmp_path, capsys):
    exp = {
        "name": "tiny",
        "scenario": {"kind": "correlation", "d": 4, "mu": 0.0, "sigma": 1.0, "rho": 0.9,
                     "affected_fraction": 0.5, "change_time_tau": 20, "horizon": 40},
        "training": {"n_nominal": 800},
        "n_trials": 6,
        "detectors": [{"type": "odit", "thresholds": [1, 10, 100]}],
    }
    p = tmp_path / "exp.json"
    p.write_text(json.dumps(exp))
    assert main(["eval", str(p), "--outdir", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "eval_odit.csv").exists()
    assert (tmp_path / "out" / "manifest.json").exists()
    assert "odit:" in capsys.readouterr().out


def test_bench(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--N2", "1000", "--d", "3", "--queries", "10", "--out", str(out)]) == 0
    assert out.read_text().startswith("backend,N2,d,n_queries,per_sample_seconds")
