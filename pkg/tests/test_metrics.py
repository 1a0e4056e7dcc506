import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from survey_disagg.metrics import (
    TABLE6_REFERENCE,
    ScoreReport,
    coverage,
    error_metrics,
    joint_band,
    pointwise_ci,
    predictive_report,
    table6_row,
)


def test_error_metrics_zero():
    m = error_metrics([0.2, 0.4], [0.2, 0.4])
    assert (m.mse, m.mae, m.msre, m.mare) == (0, 0, 0, 0)


def test_error_metrics_single():
    m = error_metrics([0.3], [0.2])
    assert m.mse == pytest.approx(0.01)
    assert m.mae == pytest.approx(0.1)
    assert m.msre == pytest.approx(0.05)
    assert m.mare == pytest.approx(0.5)


def test_error_metrics_duplicate_path():
    rng = np.random.default_rng(0)
    est, tru = rng.uniform(0.05, 0.95, 100), rng.uniform(0.05, 0.95, 100)
    rows = list(zip(est, tru))
    mse = sum((e - t) ** 2 for e, t in rows) / 100
    mae = sum(abs(e - t) for e, t in rows) / 100
    msre = sum((e - t) ** 2 / t for e, t in rows) / 100
    mare = sum(abs(e - t) / t for e, t in rows) / 100
    m = error_metrics(est, tru)
    assert (m.mse, m.mae, m.msre, m.mare) == pytest.approx((mse, mae, msre, mare), rel=1e-12)


def test_error_metrics_errors():
    with pytest.raises(ValueError):
        error_metrics([0.1], [0.0])
    with pytest.raises(ValueError):
        error_metrics([0.1, 0.2], [0.1])


def test_pointwise_symmetric():
    d = 0.5 + np.concatenate([np.linspace(-0.2, 0.2, 501)])
    lo, hi = pointwise_ci(d[:, None], 0.9)
    assert 0.5 - lo[0] == pytest.approx(hi[0] - 0.5, abs=0.01)


def test_pointwise_level_zero_is_median():
    d = np.random.default_rng(0).normal(size=(1001, 3))
    lo, hi = pointwise_ci(d, 0.0)
    np.testing.assert_allclose(lo, np.median(d, axis=0))
    np.testing.assert_allclose(hi, lo)


def test_pointwise_calibration():
    # posterior N(y, 1) for y ~ N(theta, 1) with a flat prior covers theta at the nominal rate
    rng = np.random.default_rng(1)
    theta = rng.normal(size=400)
    y = theta + rng.normal(size=400)
    draws = y[None, :] + rng.normal(size=(2000, 400))
    lo, hi = pointwise_ci(draws, 0.9)
    assert coverage(lo, hi, theta) == pytest.approx(0.9, abs=0.045)


def test_joint_band_single_quantity_close_to_pointwise():
    d = np.random.default_rng(2).normal(size=(200_000, 1))
    jl, jh = joint_band(d, 0.95)
    pl, ph = pointwise_ci(d, 0.95)
    assert jh[0] - jl[0] == pytest.approx(ph[0] - pl[0], rel=0.01)


def test_joint_band_max_of_normals():
    rng = np.random.default_rng(3)
    n, k = 20_000, 100
    d = rng.normal(size=(n, k))
    jl, jh = joint_band(d, 0.95)
    # P(max |Z_i| <= c) = (2 Phi(c) - 1)^100 = 0.95
    c = norm.ppf(0.5 + 0.5 * 0.95 ** (1 / k))
    half = 0.5 * (jh - jl) / d.std(axis=0, ddof=1)
    np.testing.assert_allclose(half, c, rtol=0.03)


def test_joint_band_boundary_contains_all_draws():
    d = np.random.default_rng(4).normal(size=(600, 5))
    jl, jh = joint_band(d, 1 - 1 / 600)
    assert np.all((d >= jl - 1e-12) & (d <= jh + 1e-12))


def test_joint_band_zero_sd_excluded(caplog):
    d = np.random.default_rng(5).normal(size=(600, 3))
    d[:, 1] = 0.4
    jl, jh = joint_band(d, 0.9)
    assert jl[1] == jh[1] == pytest.approx(0.4)
    assert "zero posterior sd" in caplog.text


@given(arrays(np.float64, (600, 4), elements=st.floats(-5, 5)), st.sampled_from([0.5, 0.8, 0.95]))
def test_joint_band_contains_pointwise(d, level):
    if np.any(np.ptp(d, axis=0) == 0):
        return
    jl, jh = joint_band(d, level)
    pl, ph = pointwise_ci(d, level)
    widths_j, widths_p = jh - jl, ph - pl
    assert np.all(widths_j >= widths_p - 1e-6)


@given(arrays(np.float64, (600, 5), elements=st.floats(0, 1)), st.permutations(range(5)))
def test_metrics_permutation_invariant(d, perm):
    if np.any(np.ptp(d, axis=0) == 0):
        return
    perm = list(perm)
    tru = np.linspace(0.1, 0.9, 5)
    a, b = error_metrics(d.mean(0), tru), error_metrics(d.mean(0)[perm], tru[perm])
    assert (a.mse, a.mae, a.msre, a.mare) == pytest.approx((b.mse, b.mae, b.msre, b.mare), rel=1e-12)
    lo, hi = joint_band(d, 0.9)
    lo2, hi2 = joint_band(d[:, perm], 0.9)
    np.testing.assert_allclose(lo[perm], lo2, atol=1e-12)
    np.testing.assert_allclose(hi[perm], hi2, atol=1e-12)


def test_coverage_extremes():
    lo, hi = np.zeros(3), np.ones(3)
    assert coverage(lo, hi, [0.5, 0.5, 0.5]) == 1.0
    assert coverage(lo, hi, [2, 2, 2]) == 0.0


def test_predictive_report_perfect():
    d = {f"s{i}": np.full(200, 0.1 * i) for i in range(1, 4)}
    r = predictive_report(d, {k: v[0] for k, v in d.items()})
    assert r.bias == pytest.approx(0) and r.mspe == pytest.approx(0)
    assert r.pi_coverage_95 == 1.0


def test_predictive_report_hand_fixture():
    d = {"a": np.linspace(0.1, 0.3, 401), "b": np.linspace(0.4, 0.6, 401), "c": np.linspace(0.0, 0.1, 401)}
    truth = {"a": 0.25, "b": 0.7, "c": 0.05}
    r = predictive_report(d, truth)
    diffs = np.array([0.2 - 0.25, 0.5 - 0.7, 0.05 - 0.05])
    assert r.bias == pytest.approx(diffs.mean())
    assert r.mspe == pytest.approx(np.mean(diffs**2))
    assert r.mape == pytest.approx(np.mean(np.abs(diffs)))
    # 50% intervals: a [0.15, 0.25] (0.25 on the edge), b excluded, c [0.025, 0.075]
    assert r.pi_coverage_50 == pytest.approx(2 / 3)
    assert r.pi_coverage_95 == pytest.approx(2 / 3)


def test_predictive_report_misaligned():
    with pytest.raises(ValueError, match="misaligned"):
        predictive_report({"a": np.zeros(10)}, {"b": 0.1})


def test_score_report_validation():
    with pytest.raises(ValueError):
        ScoreReport(coverage_95_pt=1.2)
    with pytest.raises(ValueError):
        ScoreReport(mse=-1)
    assert math.isnan(ScoreReport().bias)


def test_table6_reference_row():
    ours = TABLE6_REFERENCE[0]
    assert (ours["mspe_e5"], ours["mape_e3"], ours["pi50"], ours["pi95"]) == (4.16, 4.83, 0.523, 0.930)
    row = table6_row("x", ScoreReport(bias=3e-4, mspe=4.16e-5, mape=4.83e-3, pi_coverage_50=0.5, pi_coverage_95=0.9))
    assert row["mspe_e5"] == pytest.approx(4.16)
    assert row["bias_e2"] == pytest.approx(0.03)
