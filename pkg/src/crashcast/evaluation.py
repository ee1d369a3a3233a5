"""Forecast scoring: masked MSE/RMSE (overall and per cluster), cross-K curves
between predicted and observed hotspots, and DTW k-medoids risk-zone labels.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict

import numba
import numpy as np

from .cube import SpaceTimeCube
from .ensemble import ForecastGrid


class EvaluationError(ValueError):
    pass


def rmse(mse):
    return math.sqrt(mse)


@dataclass
class Score:
    mse: float
    rmse: float
    pairs: int

    @classmethod
    def from_errors(cls, sq_errors):
        if sq_errors.size == 0:
            raise EvaluationError("no valid (cell, week) pairs to score")
        mse = float(sq_errors.mean())
        return cls(mse, rmse(mse), int(sq_errors.size))

    def to_dict(self):
        return {"mse": self.mse, "rmse": self.rmse, "pairs": self.pairs}


@dataclass
class ModelScore:
    overall: Score
    clusters: Dict[int, Score] = field(default_factory=dict)

    def to_dict(self):
        return {"all_regions": self.overall.to_dict(),
                "clusters": {str(k): v.to_dict() for k, v in sorted(self.clusters.items())}}


@dataclass
class CrossKCurve:
    radii: np.ndarray
    values: np.ndarray
    weeks_used: int = 1

    def to_dict(self):
        return {"r": [float(r) for r in self.radii], "K": [float(v) for v in self.values],
                "weeks_used": self.weeks_used}


@dataclass
class EvalReport:
    models: Dict[str, ModelScore] = field(default_factory=dict)
    crossk: Dict[str, CrossKCurve] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "meta": self.meta,
            "models": {k: v.to_dict() for k, v in self.models.items()},
            "crossk": {k: v.to_dict() for k, v in self.crossk.items()},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self):
        """Plain-text table: one row per model, RMSE and MSE per cluster and overall."""
        clusters = sorted({c for m in self.models.values() for c in m.clusters})
        head = ["model"] + [f"c{c} {s}" for c in clusters for s in ("RMSE", "MSE")] + ["all RMSE", "all MSE"]
        rows = [head]
        for name, m in self.models.items():
            row = [name]
            for c in clusters:
                s = m.clusters.get(c)
                row += [f"{s.rmse:.4f}", f"{s.mse:.4f}"] if s else ["--", "--"]
            row += [f"{m.overall.rmse:.4f}", f"{m.overall.mse:.4f}"]
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows) + "\n"


def _truth_for(forecast: ForecastGrid, truth: SpaceTimeCube):
    if forecast.shape != (truth.grid.height, truth.grid.width):
        raise EvaluationError(f"forecast grid {forecast.shape} does not match truth "
                              f"{(truth.grid.height, truth.grid.width)}")
    weeks = np.array(forecast.weeks, dtype=int)
    if weeks.size and (weeks.min() < 0 or weeks.max() >= truth.T):
        raise EvaluationError("forecast weeks fall outside the truth cube")
    return truth.target[weeks]


def score(forecast: ForecastGrid, truth: SpaceTimeCube, labels=None) -> ModelScore:
    """MSE/RMSE over road cells and forecast weeks; nulls on either side are skipped.

    ``labels`` is an ``(H, W)`` int array with -1 for unlabeled cells.
    """
    actual = _truth_for(forecast, truth)
    valid = ~np.isnan(actual) & ~np.isnan(forecast.values) & truth.grid.road_mask[None]
    sq = (forecast.values - actual) ** 2
    overall = Score.from_errors(sq[valid])
    clusters = {}
    if labels is not None:
        labels = np.asarray(labels)
        for c in sorted(int(v) for v in np.unique(labels) if v >= 0):
            sel = valid & (labels == c)[None]
            if sel.any():
                clusters[c] = Score.from_errors(sq[sel])
    return ModelScore(overall, clusters)


# ---------------------------------------------------------------------------
# cross-K

def cell_centroids(cells, cell_size):
    """``(x, y)`` cells to centroid coordinates in miles."""
    cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
    return (cells + 0.5) * cell_size


def hotspot_points(risk, q, cell_size=1.0, mask=None):
    """Centroids of the ``q`` highest-valued cells, ties broken by (y, x)."""
    risk = np.asarray(risk, dtype=np.float64)
    ok = ~np.isnan(risk)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    if q == 0:
        return np.zeros((0, 2))
    ys, xs = np.nonzero(ok)
    if q > ys.size:
        raise EvaluationError(f"asked for {q} hotspots but only {ys.size} road cells exist")
    vals = risk[ys, xs]
    order = np.lexsort((xs, ys, -vals))[:q]
    return cell_centroids(np.column_stack((xs[order], ys[order])), cell_size)


def cross_k(points_a, points_b, area, radii):
    """Ripley cross-K without edge correction:
    ``K(r) = area / (n_a n_b) * #{(p, q): |p - q| <= r}``.
    """
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise EvaluationError("cross-K needs two nonempty point sets")
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(np.diff(radii) < 0):
        raise EvaluationError("radii must be ascending")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)).ravel()
    d.sort()
    counts = np.searchsorted(d, radii, side="right")
    return area / (len(a) * len(b)) * counts


def default_radii(stop=50.0, step=5.0):
    return np.arange(0.0, stop + step / 2, step)


def crossk_evaluate(forecast: ForecastGrid, truth: SpaceTimeCube, radii=None, area=None) -> CrossKCurve:
    """Average cross-K between observed positive cells and the same number of predicted hotspots."""
    radii = default_radii() if radii is None else np.asarray(radii, dtype=np.float64)
    actual = _truth_for(forecast, truth)
    cs = truth.grid.cell_size_miles
    area = truth.grid.area_sq_miles if area is None else area
    mask = truth.grid.road_mask
    curves = []
    for k in range(len(forecast.weeks)):
        ys, xs = np.nonzero(mask & (np.nan_to_num(actual[k]) > 0))
        if ys.size == 0:
            continue
        pts_actual = cell_centroids(np.column_stack((xs, ys)), cs)
        pts_pred = hotspot_points(forecast.values[k], ys.size, cs, mask)
        curves.append(cross_k(pts_pred, pts_actual, area, radii))
    if not curves:
        raise EvaluationError("no forecast week has an observed positive cell")
    return CrossKCurve(radii, np.mean(curves, axis=0), len(curves))


# ---------------------------------------------------------------------------
# DTW and k-medoids

@numba.njit(cache=True)
def _dtw_kernel(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = abs(ai - b[j - 1]) + best
        prev, cur = cur, prev
    return prev[m]


@numba.njit(cache=True)
def _dtw_rows(series, rows):
    n = series.shape[0]
    out = np.zeros((rows.shape[0], n))
    for r in range(rows.shape[0]):
        i = rows[r]
        for j in range(i + 1, n):
            out[r, j] = _dtw_kernel(series[i], series[j])
    return out


def dtw(a, b):
    """Dynamic time warping distance with absolute-difference local cost."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.size == 0 or b.size == 0:
        raise EvaluationError("dtw needs two nonempty 1-D series")
    return float(_dtw_kernel(a, b))


def dtw_matrix(series):
    """Symmetric pairwise DTW distances for equal-length series (rows)."""
    series = np.ascontiguousarray(series, dtype=np.float64)
    n = series.shape[0]
    upper = _dtw_rows(series, np.arange(n))
    return upper + upper.T


def k_medoids(dist, k, seed=0, max_iter=50):
    """Partitioning around medoids on a precomputed distance matrix.

    Starts from ``k`` seeded random medoids and applies the best improving
    swap per iteration. Returns ``(medoids, assignment)``.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if not 1 <= k <= n:
        raise EvaluationError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    medoids = list(np.sort(rng.choice(n, size=k, replace=False)))
    cost = dist[medoids].min(axis=0).sum()
    for _ in range(max_iter):
        best = (cost, None, None)
        for slot in range(k):
            others = [m for s, m in enumerate(medoids) if s != slot]
            base = dist[others].min(axis=0) if others else np.full(n, np.inf)
            trial = np.minimum(dist, base[None, :]).sum(axis=1)
            trial[medoids] = np.inf
            cand = int(np.argmin(trial))
            if trial[cand] < best[0] - 1e-12:
                best = (trial[cand], slot, cand)
        if best[1] is None:
            break
        medoids[best[1]] = best[2]
        cost = best[0]
    medoids = np.array(medoids)
    assignment = np.argmin(dist[medoids], axis=0)
    return medoids, assignment


def cluster_dtw(cube: SpaceTimeCube, k=3, seed=0, weeks=None, max_iter=50):
    """Label road cells by DTW k-medoids on their EPDO series.

    Clusters are numbered by ascending mean level of their medoid series.
    Returns an ``(H, W)`` int array with -1 on roadless cells.
    """
    mask = cube.grid.road_mask
    weeks = range(cube.T) if weeks is None else weeks
    series = cube.target[list(weeks)][:, mask].T
    if k > series.shape[0]:
        raise EvaluationError(f"k={k} exceeds the {series.shape[0]} road cells")
    dist = dtw_matrix(series)
    medoids, assign = k_medoids(dist, k, seed, max_iter)
    order = np.argsort([series[m].mean() for m in medoids], kind="stable")
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    labels = np.full(mask.shape, -1, dtype=int)
    labels[mask] = relabel[assign]
    return labels


def label_agreement(a, b):
    """Best fraction of matching labels over all relabelings of ``b``."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    sel = (a >= 0) & (b >= 0)
    a, b = a[sel], b[sel]
    la, lb = np.unique(a), np.unique(b)
    best = 0.0
    for perm in itertools.permutations(la, len(lb)) if len(la) >= len(lb) else []:
        mapping = dict(zip(lb, perm))
        best = max(best, float(np.mean([mapping[x] == y for x, y in zip(b, a)])))
    return best


# ---------------------------------------------------------------------------
# files

def write_labels_csv(path, labels):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_x", "cell_y", "label"])
        for y, x in np.argwhere(np.asarray(labels) >= 0):
            w.writerow([int(x), int(y), int(labels[y, x])])


def read_labels_csv(path, shape):
    labels = np.full(shape, -1, dtype=int)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            try:
                x, y, lab = int(row["cell_x"]), int(row["cell_y"]), int(row["label"])
            except (KeyError, TypeError, ValueError):
                raise EvaluationError(f"{path}: line {reader.line_num}: malformed label row") from None
            if not (0 <= x < shape[1] and 0 <= y < shape[0]):
                raise EvaluationError(f"{path}: line {reader.line_num}: cell ({x}, {y}) outside the grid")
            labels[y, x] = lab
    return labels


def write_crossk_csv(path, curve: CrossKCurve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "K"])
        for r, v in zip(curve.radii, curve.values):
            w.writerow([repr(float(r)), repr(float(v))])
