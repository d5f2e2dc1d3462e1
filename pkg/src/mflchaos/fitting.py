"""Least-squares rate fits with bootstrap intervals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import isotonic_regression, least_squares


class DegenerateDataError(ValueError):
    pass


@dataclass
class Fit:
    model: str
    params: dict
    ci: dict
    r2: float
    n_points: int

    def row(self):
        out = {"model": self.model, "n_points": self.n_points, "r2": self.r2}
        for k, v in self.params.items():
            out[k] = v
            lo, hi = self.ci.get(k, (np.nan, np.nan))
            out[f"{k}_lo"], out[f"{k}_hi"] = lo, hi
        return out


def r_squared(y, yhat) -> float:
    y = np.asarray(y, dtype=float)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - yhat) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def powerlaw(x, y):
    """OLS of ``log y`` on ``log x``; returns ``(slope, intercept, r2)``."""
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    if np.ptp(lx) == 0:
        raise DegenerateDataError("need at least two distinct x values")
    slope, icpt = np.polyfit(lx, ly, 1)
    return float(slope), float(icpt), r_squared(ly, slope * lx + icpt)


def exp_plus_floor(t, y):
    """Fit ``y = A exp(-rate t) + floor`` by least squares on ``log y``.

    Returns ``(amplitude, rate, floor, r2)``; all three parameters are kept
    positive through a log parametrisation.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise DegenerateDataError("exp_plus_floor needs positive data")
    ly = np.log(y)

    def resid(p):
        a, r, c = np.exp(np.clip(p, -700, 700))
        return np.log(a * np.exp(-r * (t - t[0])) + c) - ly

    floor0 = max(float(np.min(y)) * 0.5, 1e-300)
    amp0 = max(float(y[0] - floor0), float(y[0]) * 1e-3)
    best = None
    for r0 in (0.1, 1.0, 10.0):
        sol = least_squares(resid, np.log([amp0, r0 / max(np.ptp(t), 1e-12) * 5, floor0]),
                            method="lm", max_nfev=4000)
        if best is None or sol.cost < best.cost:
            best = sol
    a, r, c = np.exp(np.clip(best.x, -700, 700))
    with np.errstate(over="ignore"):
        a = a * np.exp(r * t[0])
    return float(a), float(r), float(c), r_squared(ly, ly + best.fun)


def bootstrap_ci(stat, n_items, n_boot=200, seed=0, level=0.95):
    """Percentile interval of ``stat(idx)`` over index resamples with replacement.

    ``stat`` receives an integer index array and returns a scalar (or raises
    :class:`DegenerateDataError`, in which case the resample is skipped).
    """
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_boot):
        idx = rng.integers(0, n_items, n_items)
        try:
            vals.append(stat(idx))
        except DegenerateDataError:
            continue
    if not vals:
        return (np.nan, np.nan), np.array([])
    vals = np.asarray(vals)
    a = (1 - level) / 2
    return (float(np.quantile(vals, a)), float(np.quantile(vals, 1 - a))), vals


def fit_table(x, y, model="powerlaw", n_boot=200, seed=0) -> Fit:
    """Fit ``model`` to the table and attach pairs-bootstrap intervals."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 4:
        raise DegenerateDataError("need at least 4 data points")
    if np.ptp(y) == 0:
        raise DegenerateDataError("zero variance in data")
    if np.ptp(x) == 0:
        raise DegenerateDataError("zero variance in abscissa")
    if model == "powerlaw":
        slope, icpt, r2 = powerlaw(x, y)
        params = {"slope": slope, "intercept": icpt}

        def refit(idx):
            if np.unique(x[idx]).size < 2:
                raise DegenerateDataError
            s, c, _ = powerlaw(x[idx], y[idx])
            return s, c
    elif model == "exp_plus_floor":
        order = np.argsort(x)
        x, y = x[order], y[order]
        amp, rate, floor, r2 = exp_plus_floor(x, y)
        params = {"amplitude": amp, "rate": rate, "floor": floor}

        def refit(idx):
            idx = np.sort(idx)
            if np.unique(x[idx]).size < 3:
                raise DegenerateDataError
            return exp_plus_floor(x[idx], y[idx])[:3]
    else:
        raise ValueError(f"unknown model {model!r}")

    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(n_boot):
        idx = rng.integers(0, x.size, x.size)
        try:
            draws.append(refit(idx))
        except (DegenerateDataError, ValueError, FloatingPointError):
            continue
    draws = np.asarray(draws, dtype=float).reshape(-1, len(params))
    draws = draws[np.all(np.isfinite(draws), axis=1)]
    ci = {}
    for k, name in enumerate(params):
        lo, hi = np.quantile(draws[:, k], [0.025, 0.975]) if len(draws) else (np.nan, np.nan)
        # the interval always covers the point estimate
        ci[name] = (float(min(lo, params[name])), float(max(hi, params[name])))
    return Fit(model, params, ci, r2, int(x.size))


def isotonic_r2(y, increasing=False) -> float:
    """Share of variance of ``y`` explained by its best monotone fit."""
    y = np.asarray(y, dtype=float)
    fit = isotonic_regression(y, increasing=increasing).x
    return r_squared(y, fit)
