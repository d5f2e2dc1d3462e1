import numpy as np
import pytest

from mflchaos import fitting


def test_noiseless_powerlaw_slope():
    n = np.array([8, 16, 32, 64, 128])
    fit = fitting.fit_table(n, 3.0 / n, "powerlaw")
    assert fit.params["slope"] == pytest.approx(-1.0, abs=1e-6)
    assert fit.params["intercept"] == pytest.approx(np.log(3.0), abs=1e-9)


def test_exp_plus_floor_recovery():
    t = np.linspace(0, 10, 41)
    fit = fitting.fit_table(t, 2 * np.exp(-t) + 0.01, "exp_plus_floor")
    assert fit.params["floor"] == pytest.approx(0.01, rel=0.05)
    assert fit.params["rate"] == pytest.approx(1.0, rel=0.05)
    assert fit.params["amplitude"] == pytest.approx(2.0, rel=0.05)


@pytest.mark.parametrize("model", ["powerlaw", "exp_plus_floor"])
def test_bootstrap_interval_contains_estimate(model, rng):
    x = np.linspace(1, 20, 12)
    y = (5 / x if model == "powerlaw" else np.exp(-0.4 * x) + 0.05) * np.exp(0.1 * rng.standard_normal(12))
    fit = fitting.fit_table(x, y, model, n_boot=200, seed=1)
    for name, value in fit.params.items():
        lo, hi = fit.ci[name]
        assert lo <= value <= hi


def test_degenerate_inputs_rejected():
    with pytest.raises(fitting.DegenerateDataError):
        fitting.fit_table([1, 2, 3], [1, 2, 3])
    with pytest.raises(fitting.DegenerateDataError):
        fitting.fit_table([1, 2, 3, 4], [1, 1, 1, 1], "exp_plus_floor")
    with pytest.raises(fitting.DegenerateDataError):
        fitting.fit_table([2, 2, 2, 2], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        fitting.fit_table([1, 2, 3, 4], [1, 2, 3, 4], "cubic")


def test_isotonic_r2_extremes():
    assert fitting.isotonic_r2([5, 4, 3, 2, 1]) == pytest.approx(1.0)
    assert fitting.isotonic_r2([1, 2, 3, 4, 5]) == pytest.approx(0.0, abs=1e-12)


def test_r_squared_constant_data():
    assert fitting.r_squared([1, 1], [1, 1]) == 1.0
