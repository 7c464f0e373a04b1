import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volfit.errors import InsufficientHistory, SeriesTooShort
from volfit.features import FittingScheme, har_features, lag_features, scheme_windows


def test_constant_series():
    fm = har_features(np.full(40, 1.7))
    np.testing.assert_allclose(fm.X, 1.7, rtol=0, atol=1e-14)
    assert np.all(fm.y == 1.7)
    assert fm.names == ("rv_d", "rv_w", "rv_m")


def test_first_row_arithmetic():
    fm = har_features(np.arange(1.0, 24.0))
    np.testing.assert_allclose(fm.X[0], [22.0, 20.0, 11.5])
    assert fm.y[0] == 23.0
    assert fm.origins[0] == 21


def test_too_short():
    with pytest.raises(SeriesTooShort):
        har_features(np.arange(22.0))
    with pytest.raises(SeriesTooShort):
        lag_features(np.arange(5.0), 5)


def test_vix_column_uses_origin_day():
    v = np.arange(30.0)
    fm = har_features(np.ones(30), vix=v * 10)
    np.testing.assert_array_equal(fm.X[:, 3], 10 * fm.origins)


def test_lags_enumeration():
    fm = lag_features(np.arange(1.0, 6.0), 3)
    np.testing.assert_array_equal(fm.X, [[3, 2, 1], [4, 3, 2]])
    np.testing.assert_array_equal(fm.y, [4, 5])


def test_one_lag_pairs():
    v = np.array([0.3, 0.1, 0.4, 0.1])
    fm = lag_features(v, 1)
    np.testing.assert_array_equal(fm.X[:, 0], v[:-1])
    np.testing.assert_array_equal(fm.y, v[1:])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=23, max_size=80))
def test_har_matches_naive_loop(values):
    v = np.array(values)
    fm = har_features(v)
    for k, t in enumerate(fm.origins):
        np.testing.assert_allclose(fm.X[k], [v[t], v[t - 4:t + 1].mean(), v[t - 21:t + 1].mean()], atol=1e-12)
        assert fm.y[k] == v[t + 1]


def test_rolling_windows_example():
    ws = scheme_windows(FittingScheme("rolling", 3, 1), 6, range(3, 6))
    assert [(w.fit_start, w.fit_stop - 1, list(w.forecast_points)) for w in ws] == \
        [(0, 2, [3]), (1, 3, [4]), (2, 4, [5])]


def test_stride_equal_to_range_is_single_window():
    ws = scheme_windows(FittingScheme("rolling", 10, 250), 300, range(50, 300))
    assert len(ws) == 1 and list(ws[0].forecast_points) == list(range(50, 300))


def test_expanding_grows_by_one():
    ws = scheme_windows(FittingScheme("expanding", 5, 1), 20, range(5, 20))
    for a, b in zip(ws, ws[1:]):
        assert b.fit_start == a.fit_start and b.fit_stop == a.fit_stop + 1


def test_last_block_truncated():
    ws = scheme_windows(FittingScheme("rolling", 5, 4), 15, range(5, 15))
    assert [len(w.forecast_points) for w in ws] == [4, 4, 2]


def test_window_longer_than_history():
    with pytest.raises(InsufficientHistory):
        scheme_windows(FittingScheme("rolling", 10, 1), 20, range(5, 20))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["rolling", "expanding"]), st.integers(1, 30), st.integers(1, 40), st.integers(0, 20),
       st.integers(1, 60))
def test_windows_partition_eval_range(style, window, stride, extra, length):
    start = window + extra
    ws = scheme_windows(FittingScheme(style, window, stride), start + length, range(start, start + length))
    covered = [i for w in ws for i in w.forecast_points]
    assert covered == list(range(start, start + length))
    for w in ws:
        assert w.fit_stop == w.forecast_points.start
        assert w.fit_stop - w.fit_start >= window
        if style == "rolling":
            assert w.fit_stop - w.fit_start == window
