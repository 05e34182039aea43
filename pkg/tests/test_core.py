import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odit.core import (ANOMALOUS, ConfigError, DataError, Dataset, DetectorConfig, ObservationVector,
                       as_matrix, derive_seed, iter_csv_rows, load_csv, make_rng, partition_dataset,
                       save_csv, stack_devices)


def test_dataset_is_read_only_copy():
    src = np.arange(6.0).reshape(3, 2)
    ds = Dataset(src)
    src[0, 0] = 99
    assert ds.rows[0, 0] == 0
    with pytest.raises(ValueError):
        ds.rows[0, 0] = 1
    assert len(ds) == 3 and ds.dim == 2


def test_dataset_rejects_non_finite_and_bad_label():
    with pytest.raises(DataError, match="row 1, column 0"):
        Dataset([[1.0], [np.nan]])
    with pytest.raises(DataError):
        Dataset([[1.0]], label="weird")


def test_observation_vector_validation():
    ObservationVector([1.0, 2.0], 1)
    with pytest.raises(DataError):
        ObservationVector([[1.0]], 1)
    with pytest.raises(DataError):
        ObservationVector([np.inf], 1)


@pytest.mark.parametrize("n, ratio, n1", [(100, 0.38, 38), (2, 0.5, 1), (1000, 0.38, 380)])
def test_partition_sizes(n, ratio, n1):
    part = partition_dataset(Dataset(np.arange(n, dtype=float)), ratio, seed=3)
    assert len(part.part1) == n1 and len(part.part2) == n - n1
    both = np.concatenate([part.index1, part.index2])
    assert np.array_equal(np.sort(both), np.arange(n))
    # rows stay in original order
    assert np.all(np.diff(part.index1) > 0)


def test_partition_deterministic_and_seed_dependent():
    ds = Dataset(np.arange(50, dtype=float))
    a = partition_dataset(ds, 0.38, 7)
    b = partition_dataset(ds, 0.38, 7)
    c = partition_dataset(ds, 0.38, 8)
    assert np.array_equal(a.index1, b.index1)
    assert not np.array_equal(a.index1, c.index1)


def test_no_partition_mode():
    ds = Dataset(np.arange(10, dtype=float))
    part = partition_dataset(ds, 1.0)
    assert not part.split
    assert part.part1 is ds and part.part2 is ds


def test_partition_errors():
    with pytest.raises(DataError):
        partition_dataset(Dataset([[1.0]]), 0.5)
    with pytest.raises(DataError):
        partition_dataset(Dataset([[1.0], [2.0]], label=ANOMALOUS), 0.5)
    with pytest.raises(ConfigError):
        partition_dataset(Dataset(np.zeros((10, 1))), 0.01)


def test_config_validation_and_round_trip(tmp_path):
    cfg = DetectorConfig(k=5, s=2, gamma=2.0, alpha=0.1)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert DetectorConfig.load(path) == cfg
    for bad in [dict(k=0), dict(k=2, s=3), dict(gamma=0), dict(alpha=1.0), dict(threshold_h=0),
                dict(partition_ratio=0), dict(rng_seed=-1)]:
        with pytest.raises(ConfigError):
            DetectorConfig(**bad)
    with pytest.raises(ConfigError, match="unknown"):
        DetectorConfig.from_dict({"kk": 1})
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        DetectorConfig.load(path)
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        DetectorConfig.load(path)
    assert json.loads(json.dumps(cfg.to_dict())) == cfg.to_dict()


def test_derive_seed():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", 2)
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")
    assert make_rng(4, "x").random() == make_rng(4, "x").random()


def test_load_csv(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n3,4\n5,6\n")
    ds = load_csv(p, has_header=True)
    assert (len(ds), ds.dim) == (3, 2)
    assert ds.name == "x"


@pytest.mark.parametrize("body, match", [("1,2\n3,NaN\n", "line 2, column 1"),
                                         ("1,2\n3\n", "expected 2 columns"),
                                         ("1,x\n", "not a number")])
def test_csv_errors(tmp_path, body, match):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(DataError, match=match):
        load_csv(p)


def test_empty_csv(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("h\n")
    with pytest.raises(DataError):
        load_csv(p, has_header=True)


def test_wide_csv(tmp_path):
    rows = np.random.default_rng(0).random((4, 1035))
    p = tmp_path / "wide.csv"
    save_csv(rows, p)
    assert load_csv(p).dim == 1035
    assert sum(1 for _ in iter_csv_rows(p)) == 4


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=3, max_size=3),
                min_size=1, max_size=8))
def test_csv_round_trip_exact(tmp_path_factory, rows):
    p = tmp_path_factory.mktemp("rt") / "rt.csv"
    save_csv(Dataset(rows), p, header=["a", "b", "c"])
    back = load_csv(p, has_header=True)
    assert np.array_equal(back.rows, np.asarray(rows))


def test_stack_devices():
    a = Dataset(np.zeros((5, 2)))
    b = Dataset(np.ones((5, 2)), label=ANOMALOUS)
    out = stack_devices([a, b])
    assert out.rows.shape == (5, 4) and out.label == ANOMALOUS
    assert np.array_equal(stack_devices([a]).rows, a.rows)
    nine = stack_devices([Dataset(np.zeros((3, 115)))] * 9)
    assert nine.dim == 1035
    with pytest.raises(DataError):
        stack_devices([a, Dataset(np.zeros((4, 2)))])
    with pytest.raises(DataError):
        stack_devices([])


def test_as_matrix():
    assert as_matrix([1.0, 2.0]).shape == (1, 2)
    assert as_matrix(ObservationVector([1.0, 2.0], 1)).shape == (1, 2)
    with pytest.raises(DataError):
        as_matrix(np.zeros((2, 3)), dim=2)
    with pytest.raises(DataError):
        as_matrix(np.zeros((2, 2, 2)))
