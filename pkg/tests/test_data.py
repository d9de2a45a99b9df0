import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatets.data import (
    PreparedSeries,
    aggregate,
    chronological_split,
    load_csv,
    load_series,
    load_tsf,
    locf_impute,
    make_windows,
    prepare_series,
    standardize,
    synth_series,
    window_count,
)
from gatets.errors import ConfigError, DataError


# -- loading ----------------------------------------------------------------
def test_two_row_csv(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("t,v\n1,1.0\n2,2.0\n")
    assert load_series(f).values.tolist() == [1.0, 2.0]


def test_empty_value_is_missing(tmp_path):
    f = tmp_path / "s.csv"
    f.write_text("t,v\n1,1.0\n2,\n3,3.0\n")
    s = load_csv(f)
    assert math.isnan(s.values[1]) and s.missing == 1


def test_csv_errors_carry_file_and_line(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("t,v\n1,1.0\n2,abc\n")
    with pytest.raises(DataError, match=r"bad\.csv:3"):
        load_csv(f)
    f.write_text("1,1.0\n3,2.0\n2,3.0\n")
    with pytest.raises(DataError, match=r"bad\.csv:3.*increase"):
        load_csv(f)


def test_single_column_and_iso_timestamps(tmp_path):
    f = tmp_path / "a.csv"
    f.write_text("4.0\n5.0\n")
    assert load_csv(f).values.tolist() == [4.0, 5.0]
    g = tmp_path / "b.csv"
    g.write_text("date,v\n2020-01-01,1\n2020-01-02,2\n")
    assert len(load_csv(g)) == 2


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_series(tmp_path / "nope.csv")


def test_tsf_reader(tmp_path):
    f = tmp_path / "x.tsf"
    f.write_text(
        "# comment\n@relation demo\n@attribute series_name string\n@attribute start_timestamp date\n"
        "@frequency 4_seconds\n@missing true\n@data\n"
        "T1:2019-08-01 00-00-01:1,2,?,4\nT2:2019-08-01 00-00-01:5,6\n"
    )
    s = load_tsf(f)
    assert s.name == "T1" and s.native_resolution == "4_seconds"
    assert np.isnan(s.values[2]) and len(s) == 4
    assert load_tsf(f, "T2").values.tolist() == [5, 6]
    with pytest.raises(DataError, match="T3"):
        load_tsf(f, "T3")


# -- cleaning ---------------------------------------------------------------
def test_locf_cases():
    assert locf_impute([1, np.nan, np.nan, 4]).tolist() == [1, 1, 1, 4]
    assert locf_impute([1.0, 2.0]).tolist() == [1.0, 2.0]
    with pytest.raises(DataError):
        locf_impute([np.nan, 1])


@given(st.lists(st.one_of(st.floats(-1e6, 1e6), st.just(float("nan"))), min_size=1, max_size=40))
def test_locf_idempotent(vals):
    vals = [1.0] + vals
    once = locf_impute(vals)
    assert np.array_equal(locf_impute(once), once)
    assert not np.isnan(once).any()


def test_aggregate_cases():
    assert aggregate([1, 2, 3, 4], 2).tolist() == [1.5, 3.5]
    assert aggregate([1, 2, 3], 1).tolist() == [1, 2, 3]
    assert len(aggregate(np.arange(5), 2)) == 2
    with pytest.raises(ConfigError):
        aggregate([1, 2], 0)


@given(st.integers(1, 6), st.integers(1, 10))
def test_aggregate_preserves_the_mean_on_aligned_input(factor, blocks):
    v = np.random.default_rng(factor * 100 + blocks).standard_normal(factor * blocks)
    assert abs(aggregate(v, factor).mean() - v.mean()) < 1e-12


def test_split_cases():
    assert chronological_split(100) == {"train": (0, 80), "val": (80, 90), "test": (90, 100)}
    s = chronological_split(101)
    assert s["test"] == (90, 101)
    with pytest.raises(DataError, match="val"):
        chronological_split(20, context=4, horizon=2)


def test_standardize_cases():
    z, mu, sd = standardize([0.0, 2.0, 3.0], (0, 2))
    assert (mu, sd) == (1.0, 1.0) and z[2] == 2.0
    prepared = PreparedSeries(np.array([0.0, 2.0, 100.0]), mu, sd, {"train": (0, 2)})
    assert np.allclose(prepared.inverse(prepared.standardized()), prepared.values, atol=1e-12, rtol=0)
    assert prepared.standardized()[2] == 99.0  # far outside 3 sigma, no clipping
    with pytest.raises(DataError, match="constant"):
        standardize([1.0, 1.0, 5.0], (0, 2))


# -- windows ----------------------------------------------------------------
def prepared_from(values, ratios=(0.8, 0.1, 0.1)):
    return prepare_series(np.asarray(values, dtype=float), 1, ratios)


def test_window_count_and_alignment():
    assert window_count(10, 4, 2, 1) == 5
    assert window_count(10, 4, 2, 10) == 1
    vals = np.arange(100, dtype=float) ** 1.5
    p = prepared_from(vals, (0.5, 0.25, 0.25))
    w = make_windows(p, 4, 2)
    train = w["train"]
    assert len(train) == window_count(50, 4, 2)
    i = 7
    assert np.allclose(train.denormalize(train.contexts[i]), vals[i:i + 4], rtol=0, atol=1e-9)
    assert np.array_equal(train.targets_raw[i], vals[i + 4:i + 6])
    assert train.mase_scale == np.mean(np.abs(np.diff(vals[:50])))


@settings(max_examples=60, deadline=None)
@given(st.integers(60, 400), st.integers(1, 8), st.integers(1, 5), st.integers(1, 6))
def test_windows_never_cross_split_boundaries(n, T, H, stride):
    p = prepared_from(np.sin(np.arange(n) * 0.3) + np.arange(n) * 0.01)
    try:
        w = make_windows(p, T, H, stride)
    except DataError:
        return
    for split, ds in w.items():
        lo, hi = p.splits[split]
        assert ds.starts.min() >= lo and ds.starts.max() + T + H <= hi
        assert len(ds) == window_count(hi - lo, T, H, stride)


def test_zero_share_and_too_short_split():
    vals = np.r_[np.arange(1.0, 81.0), np.zeros(20)]
    w = make_windows(prepared_from(vals), 3, 1)
    assert w["test"].zero_share == 1.0 and w["train"].zero_share == 0.0
    with pytest.raises(DataError, match="val split has 4 points"):
        make_windows(prepared_from(np.arange(40.0)), 3, 2)


# -- synthetic --------------------------------------------------------------
def test_synthetic_streams():
    s = synth_series("sine", 200)
    assert np.array_equal(s.values, np.sin(2 * np.pi * np.arange(200) / 24))
    inter = synth_series("intermittent", 2000, seed=3)
    assert np.mean(inter.values == 0) > 0.3
    for kind in ("sine", "regime", "intermittent"):
        assert np.array_equal(synth_series(kind, 300, seed=4).values, synth_series(kind, 300, seed=4).values)
    assert not np.array_equal(synth_series("regime", 300, 1).values, synth_series("regime", 300, 2).values)
    with pytest.raises(ConfigError):
        synth_series("chaos", 10)


def test_regime_series_switches_character():
    v = synth_series("regime", 800, seed=0, block=200).values
    fast, slow = v[:200], v[200:400]
    # the fast regime flips sign far more often than the slow one
    assert np.sum(np.diff(np.sign(fast)) != 0) > 3 * np.sum(np.diff(np.sign(slow)) != 0)


def test_prepare_records_provenance():
    raw = synth_series("sine", 300)
    raw.values[[10, 11, 50]] = np.nan
    p = prepare_series(raw, aggregation=3)
    assert p.imputed == 3 and p.aggregation == 3 and len(p.values) == 100
    assert PreparedSeries.from_dict(p.to_dict()).values.tolist() == p.values.tolist()
