import math
import statistics

import numpy as np
import pytest
from hypothesis import given, strategies as st

from covmoe.datahub import (
    CALENDAR_NAMES, ConfigError, CsvSchema, IngestError, Scaler, SeriesFrame, derive_calendar_covariates,
    dirichlet_sizes, load_csv, make_windows, normalize, partition_clients, synthetic_frames, write_csv,
)
from covmoe.numkit import Rng


def write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def frame_of(values, start="2024-01-01T00:00:00", covs=None):
    values = np.asarray(values, dtype=np.float64).reshape(len(values), -1)
    T = len(values)
    stamps = np.datetime64(start, "s") + np.timedelta64(3600, "s") * np.arange(T)
    covs = np.zeros((T, 0)) if covs is None else np.asarray(covs, dtype=np.float64).reshape(T, -1)
    return SeriesFrame(stamps, values, 0, covs, tuple(f"c{i}" for i in range(covs.shape[1])),
                       tuple(f"v{i}" for i in range(values.shape[1])))


# -- ingestion ---------------------------------------------------------------

def test_three_row_file(tmp_path):
    p = write(tmp_path / "a.csv", ["timestamp,price", "2024-01-01T00:00:00Z,1.0",
                                   "2024-01-01T01:00:00Z,2.0", "2024-01-01T02:00:00Z,3.0"])
    f = load_csv(p, CsvSchema(target="price"))
    assert f.T == 3 and f.values.shape == (3, 1)
    assert f.fill_count == 0


def test_missing_hour_is_forward_filled(tmp_path):
    rows = ["timestamp,price"] + [f"2024-01-01T{h:02d}:00:00Z,{h}.0" for h in range(12) if h != 5]
    f = load_csv(write(tmp_path / "a.csv", rows), CsvSchema(target="price"))
    assert f.T == 12 and f.fill_count == 1
    assert f.values[5, 0] == 4.0


def test_shuffled_rows_give_identical_frame(tmp_path):
    rows = [f"2024-01-01T{h:02d}:00:00Z,{h * 1.5},{-h}" for h in range(10)]
    schema = CsvSchema(target="price", covariates=("temp",))
    a = load_csv(write(tmp_path / "a.csv", ["timestamp,price,temp"] + rows), schema)
    shuffled = [rows[i] for i in Rng(0, "shuffle").permutation(len(rows))]
    b = load_csv(write(tmp_path / "b.csv", ["timestamp,price,temp"] + shuffled), schema)
    assert a.same_as(b)


@pytest.mark.parametrize("lines, needle", [
    (["timestamp,price", "2024-01-01T00:00:00Z,1", "2024-01-01T00:00:00Z,2"], "duplicate"),
    (["timestamp,price", "2024-01-01T00:00:00Z,1", "not-a-time,2"], "line 3"),
    (["timestamp,price", "2024-01-01T00:00:00Z,abc"], "line 2"),
    (["timestamp,load", "2024-01-01T00:00:00Z,1"], "missing column"),
    (["timestamp,price", "2024-01-01T00:00:00Z,1", "2024-01-01T09:00:00Z,2"], "missing"),
])
def test_bad_files_raise_ingest_error(tmp_path, lines, needle):
    with pytest.raises(IngestError, match=needle):
        load_csv(write(tmp_path / "x.csv", lines), CsvSchema(target="price"))


def test_missing_file(tmp_path):
    with pytest.raises(IngestError):
        load_csv(tmp_path / "nope.csv", CsvSchema(target="price"))


def test_csv_round_trip(tmp_path):
    f = synthetic_frames(1, 3)[0]
    write_csv(f, tmp_path / "r.csv")
    g = derive_calendar_covariates(load_csv(tmp_path / "r.csv", CsvSchema(target="price", channels=("load",),
                                                                           covariates=("temperature",))))
    assert np.array_equal(f.values, g.values)
    assert np.array_equal(f.covariates, g.covariates)


# -- calendar ----------------------------------------------------------------

def test_calendar_features():
    f = derive_calendar_covariates(frame_of(np.zeros(30), start="2024-01-01T00:00:00"))  # a Monday
    cal = dict(zip(CALENDAR_NAMES, f.covariates[0]))
    assert cal["hour_sin"] == 0.0 and cal["hour_cos"] == 1.0
    assert cal["dow_0"] == 1.0 and sum(cal[f"dow_{i}"] for i in range(7)) == 1.0
    assert cal["weekend"] == 0.0
    six = dict(zip(CALENDAR_NAMES, f.covariates[6]))
    assert six["hour_sin"] == pytest.approx(1.0, abs=1e-15)
    assert six["hour_cos"] == pytest.approx(0.0, abs=1e-15)
    sat = derive_calendar_covariates(frame_of(np.zeros(2), start="2024-01-06T00:00:00"))
    assert sat.covariates[0, CALENDAR_NAMES.index("weekend")] == 1.0


# -- windows -----------------------------------------------------------------

def test_window_counts():
    f = frame_of(np.arange(10.0))
    assert len(make_windows(f, 4, 2, stride=1)) == 5
    assert len(make_windows(f, 4, 2, stride=10)) == 1
    with pytest.raises(ConfigError):
        make_windows(f, 9, 2)


@given(st.integers(8, 40), st.integers(1, 6), st.integers(1, 4), st.integers(1, 5), st.integers(0, 999))
def test_windows_match_index_slicing(T, T_c, H, stride, seed):
    if T_c + H > T:
        return
    rng = Rng(seed, "win")
    f = frame_of(rng.normal(size=(T, 2)), covs=rng.normal(size=(T, 3)))
    ws = make_windows(f, T_c, H, stride)
    assert len(ws) == (T - T_c - H) // stride + 1
    for i, w in enumerate(ws):
        s = i * stride
        assert np.array_equal(w.context, f.values[s:s + T_c])
        assert np.array_equal(w.context_cov, f.covariates[s:s + T_c])
        assert np.array_equal(w.target_future, f.values[s + T_c:s + T_c + H, 0])
        assert w.origin == f.timestamps[s + T_c]


# -- partitioning ------------------------------------------------------------

def test_by_region_one_frame_per_client():
    frames = synthetic_frames(5, 6)
    parts = partition_clients(frames, 5, "by-region", T_c=24, H=4, stride=6)
    for k, p in enumerate(parts):
        assert {w.region_code for w in p.all_windows()} == {k}
        assert len(p.all_windows()) == len(make_windows(frames[k], 24, 4, 6))


def test_clients_hold_disjoint_windows():
    parts = partition_clients(synthetic_frames(3, 8), 3, "by-region", T_c=24, H=4, stride=4)
    keys = [{w.key for w in p.all_windows()} for p in parts]
    assert not (keys[0] & keys[1]) and not (keys[1] & keys[2]) and not (keys[0] & keys[2])


def test_splits_are_chronological():
    p = partition_clients(synthetic_frames(2, 20), 2, "by-region", T_c=24, H=4, stride=6)[0]
    seq = p.train + p.public + p.val + p.test
    assert all(a.origin < b.origin for a, b in zip(seq, seq[1:]))


@pytest.mark.parametrize("scheme", ["by-region", "dirichlet"])
def test_sizes_sum(scheme):
    f = frame_of(np.arange(15.0))
    parts = partition_clients([f, f], 2, scheme, T_c=4, H=2, stride=1, alpha=1.0)
    assert sum(len(p.all_windows()) for p in parts) == (10 if scheme == "dirichlet" else 20)


@given(st.integers(1, 2000), st.integers(2, 8), st.floats(0.05, 1e3), st.integers(0, 10**6))
def test_dirichlet_sizes_sum_to_n(n, K, alpha, seed):
    sizes = dirichlet_sizes(n, K, alpha, seed)
    assert sum(sizes) == n and min(sizes) >= 0 and len(sizes) == K


def test_dirichlet_large_alpha_is_near_equal():
    # per draw the ratio is random; its median over seeds is what alpha controls
    ratios = [max(s) / min(s) for s in (dirichlet_sizes(1000, 2, 100.0, seed) for seed in range(200))]
    assert statistics.median(ratios) < 1.2
    tight = [max(s) / min(s) for s in (dirichlet_sizes(1000, 5, 1e5, seed) for seed in range(50))]
    assert max(tight) < 1.2


def test_partition_rejects_bad_input():
    f = frame_of(np.arange(20.0))
    with pytest.raises(ConfigError):
        partition_clients([f], 1, T_c=4, H=2)
    with pytest.raises(ConfigError):
        partition_clients([f], 2, "by-region", T_c=4, H=2)
    with pytest.raises(ConfigError):
        partition_clients([f, f], 2, "zipf", T_c=4, H=2)


# -- scaling -----------------------------------------------------------------

def test_scaler_hand_values():
    # one window whose context is [8, 12, 8, 12]: mean 10, std 2; second channel constant 7
    f = frame_of(np.stack([[8.0, 12.0, 8.0, 12.0, 0.0], np.full(5, 7.0)], 1))
    sc = Scaler.fit(make_windows(f, 4, 1))
    assert sc.transform_values(np.array([12.0, 7.0])).tolist() == [1.0, 7.0]
    assert sc.value_scale[1] == 1.0 and sc.warnings


def test_calendar_columns_not_scaled():
    f = synthetic_frames(1, 6)[0]
    sc = Scaler.fit(make_windows(f, 24, 4, 6), f.covariate_names)
    cal = [f.covariate_names.index(n) for n in CALENDAR_NAMES]
    assert np.all(sc.cov_offset[cal] == 0) and np.all(sc.cov_scale[cal] == 1)
    assert sc.cov_scale[0] != 1


@given(st.integers(0, 10**6))
def test_scaler_round_trip(seed):
    rng = Rng(seed, "sc")
    f = frame_of(rng.normal(3.0, 5.0, size=(40, 2)), covs=rng.normal(size=(40, 1)))
    ws = make_windows(f, 8, 2, 4)
    sc = Scaler.fit(ws)
    x = rng.normal(size=(7, 2)) * 10
    assert np.max(np.abs(sc.inverse_values(sc.transform_values(x)) - x)) < 1e-12
    y = rng.normal(size=4)
    assert np.max(np.abs(sc.inverse_target(sc.transform_target(y)) - y)) < 1e-12
    assert Scaler.from_records(sc.to_records()).to_records() == sc.to_records()


def test_normalize_uses_train_statistics_only():
    p = partition_clients(synthetic_frames(2, 30), 2, T_c=24, H=4, stride=6)[0]
    np_, sc = normalize(p)
    train_ctx = np.concatenate([w.context for w in np_.train])
    assert np.allclose(train_ctx.mean(axis=0), 0.0, atol=1e-12)
    test_ctx = np.concatenate([w.context for w in np_.test])
    assert not np.allclose(test_ctx.mean(axis=0), 0.0, atol=1e-3)


def test_synthetic_frames_reproducible():
    a, b = synthetic_frames(2, 5, seed=3), synthetic_frames(2, 5, seed=3)
    assert all(x.same_as(y) for x, y in zip(a, b))
    assert not synthetic_frames(2, 5, seed=4)[0].same_as(a[0])
    assert math.isclose(float(a[0].covariates[0, 1 + CALENDAR_NAMES.index("hour_cos")]), 1.0)
