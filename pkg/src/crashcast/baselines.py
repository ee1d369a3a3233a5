"""Reference forecasters: pooled ridge regression on lags, and per-cell ARIMA.

ARIMA is fitted by conditional sum of squares: the differenced series ``w``
is filtered as ``e_t = w_t - c - sum phi_i w_{t-i} - sum theta_j e_{t-j}``
with residuals before the first usable step set to zero, and ``sum e_t^2`` is
minimized with Nelder-Mead over the stationary, invertible region.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter
from scipy.special import comb

from ._parallel import parallel_map
from .cube import SpaceTimeCube, SplitIndex


class BaselineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# linear regression

@dataclass
class LinearModel:
    lookback: int
    feature_names: List[str]
    coef: np.ndarray  # lag_1..lag_L, features..., intercept
    tau: float = 1e-6

    def __post_init__(self):
        self.coef = np.asarray(self.coef, dtype=np.float64)
        if self.coef.shape != (self.lookback + len(self.feature_names) + 1,):
            raise BaselineError("coefficient count must be lookback + features + 1")

    @property
    def lag_coef(self):
        return self.coef[:self.lookback]

    @property
    def intercept(self):
        return float(self.coef[-1])


def fit_linear(X, y, tau=1e-6):
    """Ridge solution of ``(X'X + tau I) b = X'y``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    if n < k:
        raise BaselineError(f"{n} samples cannot determine {k} coefficients")
    return np.linalg.solve(X.T @ X + tau * np.eye(k), X.T @ y)


def _design(cube: SpaceTimeCube, weeks, lookback, names):
    """Rows for every (week, road cell): lags newest first, features, 1."""
    mask = cube.grid.road_mask
    weeks = np.asarray(list(weeks), dtype=int)
    feats = [cube.features[n][mask] for n in names]
    blocks = []
    for t in weeks:
        cols = [cube.target[t - j][mask] for j in range(1, lookback + 1)]
        cols += feats
        cols.append(np.ones(mask.sum()))
        blocks.append(np.column_stack(cols))
    if not blocks:
        return np.zeros((0, lookback + len(names) + 1))
    return np.vstack(blocks)


def fit_lr(cube: SpaceTimeCube, split: SplitIndex, lookback=8, tau=1e-6) -> LinearModel:
    names = cube.feature_names
    weeks = range(max(lookback, split.train_weeks.start), split.train_weeks.stop)
    X = _design(cube, weeks, lookback, names)
    mask = cube.grid.road_mask
    y = np.concatenate([cube.target[t][mask] for t in weeks]) if len(weeks) else np.zeros(0)
    return LinearModel(lookback, list(names), fit_linear(X, y, tau), tau)


def predict_lr(model: LinearModel, cube: SpaceTimeCube, weeks):
    """One-step forecasts from observed lags, clamped at zero; NaN off-road."""
    weeks = list(weeks)
    if weeks and min(weeks) < model.lookback:
        raise BaselineError(f"week {min(weeks)} has fewer than {model.lookback} weeks of history")
    mask = cube.grid.road_mask
    out = np.full((len(weeks),) + mask.shape, np.nan)
    for k, t in enumerate(weeks):
        X = _design(cube, [t], model.lookback, model.feature_names)
        out[k][mask] = np.maximum(0.0, X @ model.coef)
    return out


# ---------------------------------------------------------------------------
# ARIMA

@dataclass
class ArimaModel:
    order: Tuple[int, int, int]
    ar: np.ndarray
    ma: np.ndarray
    intercept: float
    sigma2: float
    series: np.ndarray = field(repr=False)
    fallback: Optional[str] = None

    def __post_init__(self):
        p, d, q = self.order
        if min(p, d, q) < 0:
            raise BaselineError(f"ARIMA orders must be nonnegative, got {self.order}")
        self.ar = np.asarray(self.ar, dtype=np.float64).reshape(p)
        self.ma = np.asarray(self.ma, dtype=np.float64).reshape(q)
        self.series = np.asarray(self.series, dtype=np.float64)


def difference(series, d):
    w = np.asarray(series, dtype=np.float64)
    for _ in range(d):
        w = np.diff(w)
    return w


def css_residuals(w, ar, ma, intercept):
    """Conditional residuals; the first ``p`` entries are zero."""
    p = len(ar)
    u = np.zeros(len(w))
    if len(w) > p:
        u[p:] = w[p:] - intercept
        for i, phi in enumerate(ar, start=1):
            u[p:] -= phi * w[p - i:len(w) - i]
    if len(ma) == 0:
        return u
    e = np.zeros(len(w))
    e[p:] = lfilter([1.0], np.concatenate(([1.0], ma)), u[p:])
    return e


def _inside_unit_circle(coeffs):
    """True when every root of ``z^k + c_1 z^(k-1) + ... + c_k`` has modulus < 1."""
    if len(coeffs) == 0:
        return True
    if len(coeffs) == 1:
        return abs(coeffs[0]) < 1.0
    return bool(np.all(np.abs(np.roots(np.concatenate(([1.0], coeffs)))) < 1.0))


def _css(theta, w, p, q):
    # stationary AR and invertible MA only; outside, the recursion diverges
    if not (_inside_unit_circle(-theta[:p]) and _inside_unit_circle(theta[p:p + q])):
        return 1e300
    e = css_residuals(w, theta[:p], theta[p:p + q], theta[-1])
    val = float(e @ e)
    return val if math.isfinite(val) else 1e300


def fit_arima(series, order=(1, 0, 1), maxiter=2000) -> ArimaModel:
    series = np.asarray(series, dtype=np.float64)
    p, d, q = order
    if min(p, d, q) < 0:
        raise BaselineError(f"ARIMA orders must be nonnegative, got {order}")
    w = difference(series, d)
    if len(w) <= p + d + q + 2:
        raise BaselineError(f"series of length {len(series)} is too short for ARIMA{tuple(order)}")
    if not np.all(np.isfinite(w)):
        raise BaselineError("series contains non-finite values")

    if np.ptp(w) == 0:
        return ArimaModel(order, np.zeros(p), np.zeros(q), float(w[0]), 0.0, series, "constant")
    if p == 0 and q == 0:
        c = float(w.mean())
        return ArimaModel(order, [], [], c, float(((w - c) ** 2).mean()), series)

    start = np.concatenate((np.zeros(p + q), [w.mean()]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(_css, start, args=(w, p, q), method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-8, "fatol": 1e-12})
    if not math.isfinite(res.fun) or res.fun >= 1e300:
        c = float(w.mean())
        return ArimaModel(order, np.zeros(p), np.zeros(q), c, float(w.var()), series, "non-finite objective")
    x = res.x
    n_eff = max(len(w) - p, 1)
    return ArimaModel(order, x[:p], x[p:p + q], float(x[-1]), float(res.fun) / n_eff, series)


def _undifference_step(history, w_next, d):
    """Level value whose d-th difference, given ``history``, equals ``w_next``."""
    y = w_next
    for j in range(1, d + 1):
        y -= comb(d, j, exact=True) * (-1) ** j * history[-j]
    return y


def forecast_arima(model: ArimaModel, steps: int):
    """Multi-step forecasts past the end of the fitted series."""
    p, d, q = model.order
    y = list(model.series)
    w = list(difference(model.series, d))
    e = list(css_residuals(np.array(w), model.ar, model.ma, model.intercept))
    out = []
    for _ in range(steps):
        w_next = model.intercept
        w_next += sum(model.ar[i] * w[-1 - i] for i in range(p) if len(w) > i)
        w_next += sum(model.ma[j] * e[-1 - j] for j in range(q) if len(e) > j)
        y_next = _undifference_step(y, w_next, d)
        y.append(y_next)
        w.append(w_next)
        e.append(0.0)
        out.append(y_next)
    return np.array(out)


def rolling_arima(model: ArimaModel, observed, weeks):
    """One-step-ahead forecasts for ``weeks`` from the observed series.

    ``observed`` must contain every week before ``max(weeks)``; parameters
    stay fixed at their fitted values.
    """
    p, d, q = model.order
    observed = np.asarray(observed, dtype=np.float64)
    weeks = np.asarray(list(weeks), dtype=int)
    if weeks.size and weeks.min() < d + p:
        raise BaselineError(f"week {weeks.min()} has too little history for ARIMA{tuple(model.order)}")
    horizon = int(weeks.max()) + 1 if weeks.size else 0
    # extend by one placeholder so the last requested week always has a slot
    y = np.concatenate((observed[:horizon], np.zeros(max(0, horizon - len(observed)))))
    if len(observed) < horizon - 1:
        raise BaselineError("observed series is too short for the requested weeks")
    if model.fallback == "constant" or (p == 0 and q == 0):
        w_hat = np.full(horizon, model.intercept)
    else:
        w = difference(y, d)
        # predictions for w_t use only w_{<t} and e_{<t}
        e = css_residuals(w, model.ar, model.ma, model.intercept)
        w_hat_d = w - e
        # first p entries have no conditional prediction; fall back to the intercept
        w_hat_d[:p] = model.intercept
        w_hat = np.concatenate((np.full(d, np.nan), w_hat_d))
    out = np.empty(weeks.size)
    for k, t in enumerate(weeks):
        out[k] = _undifference_step(y[:t], float(w_hat[t]), d)
    return out


def _arima_cell(args):
    series, observed, weeks, order = args
    try:
        model = fit_arima(series, order)
    except BaselineError:
        return np.full(len(weeks), float(np.mean(series))), "too short"
    preds = rolling_arima(model, observed, weeks)
    if not np.all(np.isfinite(preds)):
        return np.full(len(weeks), float(np.mean(series))), "non-finite forecast"
    return preds, model.fallback


def arima_forecast_grid(cube: SpaceTimeCube, split: SplitIndex, weeks, order=(1, 0, 1), workers=1):
    """Per-road-cell ARIMA fitted on training weeks, rolled over ``weeks``.

    Returns ``(values, flags)`` where ``values`` is ``(len(weeks), H, W)``
    clamped at zero with NaN off-road and ``flags`` maps ``(x, y)`` to the
    fallback reason for cells that needed one.
    """
    weeks = list(weeks)
    mask = cube.grid.road_mask
    tr = split.train_weeks
    cells = [(int(x), int(y)) for y, x in np.argwhere(mask)]
    jobs = [(cube.target[tr.start:tr.stop, y, x], cube.target[:, y, x], weeks, tuple(order)) for x, y in cells]
    results = parallel_map(_arima_cell, jobs, workers)
    out = np.full((len(weeks),) + mask.shape, np.nan)
    flags = {}
    for (x, y), (preds, flag) in zip(cells, results):
        out[:, y, x] = np.maximum(0.0, preds)
        if flag:
            flags[(x, y)] = flag
    return out, flags
