import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hydra_lstm import autodiff as ad
from hydra_lstm.autodiff import Tensor
from hydra_lstm.objectives import (
    EmptySeriesError,
    InvalidDataError,
    UndefinedScoreError,
    climatology_fit,
    cqes,
    crossing_fraction,
    cumulative_quantile_loss,
    day_of_year,
    empirical_coverage,
    empirical_quantile,
    quantile_loss,
    quantile_loss_tensor,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
tau_levels = st.sampled_from([0.1, 0.5, 0.9])


@pytest.mark.parametrize(
    "tau, y, y_hat, expected",
    [(0.5, 2.0, 1.0, 0.5), (0.1, 0.0, 10.0, 9.0), (0.9, 10.0, 0.0, 9.0)],
)
def test_quantile_loss_examples(tau, y, y_hat, expected):
    assert quantile_loss(tau, y, y_hat) == pytest.approx(expected, abs=1e-15)


def test_cumulative_loss_examples():
    assert cumulative_quantile_loss(2.0, [1.0, 2.0, 3.0]) == pytest.approx(0.2 / 3, abs=1e-15)
    assert cumulative_quantile_loss(4.5, [4.5, 4.5, 4.5]) == 0.0


def test_tie_takes_second_branch():
    assert quantile_loss(0.3, 1.0, 1.0) == 0.0


def test_quantile_loss_rejects_nan_and_bad_tau():
    with pytest.raises(InvalidDataError):
        quantile_loss(0.5, np.nan, 1.0)
    with pytest.raises(ValueError):
        quantile_loss(1.0, 1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(finite, st.tuples(finite, finite, finite))
def test_cumulative_loss_matches_three_term_sum(y, forecast):
    expected = (
        quantile_loss(0.1, y, forecast[0])
        + quantile_loss(0.5, y, forecast[1])
        + quantile_loss(0.9, y, forecast[2])
    ) / 3
    assert cumulative_quantile_loss(y, list(forecast)) == pytest.approx(expected, rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), finite, finite)
def test_quantile_loss_nonnegative(tau, y, y_hat):
    assert quantile_loss(tau, y, y_hat) >= 0.0


@settings(max_examples=50, deadline=None)
@given(tau_levels, finite, st.floats(0.01, 100))
def test_subgradient_away_from_kink(tau, y, offset):
    h = 1e-6
    for y_hat, slope in ((y - offset, -tau), (y + offset, 1 - tau)):
        numeric = (quantile_loss(tau, y, y_hat + h) - quantile_loss(tau, y, y_hat - h)) / (2 * h)
        assert numeric == pytest.approx(slope, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(finite, st.floats(0.001, 100))
def test_coincident_predictions_scale_absolute_error(y, gap):
    # all three under the observation: (0.1 + 0.5 + 0.9) / 3 * |y - y_hat|
    y_hat = y - gap
    value = cumulative_quantile_loss(y, [y_hat] * 3)
    assert value == pytest.approx(0.5 * gap, rel=1e-9)


def test_minimizer_is_empirical_quantile_by_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 51))
        sample = np.round(rng.normal(size=n) * 10, 2)
        tau = float(rng.choice([0.1, 0.5, 0.9]))
        grid = np.unique(np.concatenate([sample, np.linspace(sample.min() - 1, sample.max() + 1, 401)]))
        losses = np.array([quantile_loss(tau, sample, c).mean() for c in grid])
        best = grid[np.isclose(losses, losses.min(), rtol=0, atol=1e-12)]
        # any minimizer lies between the lower and upper empirical tau-quantiles
        ordered = np.sort(sample)
        lo = ordered[int(np.ceil(n * tau)) - 1]
        hi = ordered[min(int(np.floor(n * tau)), n - 1)]
        assert best.min() >= lo - 1e-9 and best.max() <= hi + 1e-9
        assert np.any(np.isclose(best, lo)) or np.any(np.isclose(best, hi))


def test_tensor_loss_matches_array_loss_and_gradient(fd_check):
    rng = np.random.default_rng(1)
    pred = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    y = rng.normal(size=6)
    value = quantile_loss_tensor(pred, y).item()
    assert value == pytest.approx(np.mean(cumulative_quantile_loss(y, pred.data)), rel=1e-14)
    assert fd_check(lambda: quantile_loss_tensor(pred, y), [pred]) < 1e-6


def test_tensor_loss_shape_check():
    with pytest.raises(ad.DimensionError):
        quantile_loss_tensor(Tensor(np.zeros((4, 3))), np.zeros(5))


def test_empirical_quantile_interpolates():
    assert empirical_quantile(np.arange(1.0, 11.0), 0.5) == 5.5


def test_day_of_year_merges_leap_day():
    d = np.array(["2020-02-28", "2020-02-29", "2020-03-01", "2021-03-01", "2021-12-31"], dtype="datetime64[D]")
    assert day_of_year(d).tolist() == [58, 58, 59, 59, 364]


def _series(years, fn):
    dates = np.arange(np.datetime64(f"{years[0]}-01-01"), np.datetime64(f"{years[-1] + 1}-01-01"))
    return dates, fn(dates)


def test_identical_years_give_that_series():
    dates, _ = _series([2001, 2002, 2003], lambda d: None)
    one_year = np.sin(np.arange(365) / 20.0) + 2
    values = np.tile(one_year, 3)
    clim = climatology_fit({"A": (dates, values)})
    for k in range(3):
        assert np.allclose(clim.table["A"][:, k], one_year, rtol=0, atol=1e-15)


def test_climatology_median_of_one_to_ten():
    dates = np.array([f"{2000 + k}-07-01" for k in range(10)], dtype="datetime64[D]")
    clim = climatology_fit({"A": (dates, np.arange(1.0, 11.0))})
    assert clim.predict("A", np.array(["2030-07-01"], dtype="datetime64[D]"))[0, 1] == 5.5
    assert len(clim.filled_days["A"]) == 364


def test_climatology_needs_two_years():
    dates = np.arange(np.datetime64("2001-01-01"), np.datetime64("2002-01-01"))
    with pytest.raises(InvalidDataError):
        climatology_fit({"A": (dates, np.ones(len(dates)))})


def test_climatology_self_score_is_zero():
    rng = np.random.default_rng(2)
    dates, values = _series(list(range(2001, 2011)), lambda d: rng.gamma(2.0, 3.0, len(d)))
    clim = climatology_fit({"A": (dates, values)})
    f = clim.predict("A", dates)
    assert abs(cqes(values, f, f)) <= 1e-12


def test_cqes_examples():
    y = np.array([1.0, 2.0, 3.0, 5.0])
    clim = np.column_stack([y - 1, y, y + 2])
    assert cqes(y, clim, clim) == 0.0
    assert cqes(y, np.column_stack([y, y, y]), clim) == 1.0
    # doubling every error doubles the loss
    worse = np.column_stack([y - 2, y, y + 4])
    assert cqes(y, worse, clim) == pytest.approx(-1.0, abs=1e-15)


def test_cqes_errors():
    with pytest.raises(EmptySeriesError):
        cqes([], np.zeros((0, 3)), np.zeros((0, 3)))
    y = np.ones(3)
    perfect = np.ones((3, 3))
    with pytest.raises(UndefinedScoreError):
        cqes(y, perfect, perfect)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_cqes_unit_invariance(scale, seed):
    rng = np.random.default_rng(seed)
    y = rng.gamma(2.0, 1.0, 20)
    f = np.sort(rng.gamma(2.0, 1.0, (20, 3)), axis=1)
    c = np.sort(rng.gamma(2.0, 1.0, (20, 3)), axis=1)
    assert cqes(y * scale, f * scale, c * scale) == pytest.approx(cqes(y, f, c), rel=1e-9, abs=1e-12)


def test_coverage_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert empirical_coverage(y, 0.0) == 1.0
    assert empirical_coverage(y, 10.0) == 0.0
    assert empirical_coverage(y, np.array([1.0, 0.0, 5.0])) == pytest.approx(1 / 3)
    with pytest.raises(EmptySeriesError):
        empirical_coverage([], [])


def test_crossing_fraction():
    f = np.array([[1, 2, 3], [3, 2, 1], [1, 1, 1], [1, 3, 2]], dtype=float)
    assert crossing_fraction(f) == 0.5
