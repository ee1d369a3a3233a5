"""Moving-window ConvLSTM ensemble.

The grid is covered by (possibly overlapping) rectangular windows, one
ConvLSTM is trained per window, and each cell's forecast is the
weight-normalized average of the windows that contain it::

    C(s, t) = sum_i w_i C_i(s, t) [s in W_i] / sum_i w_i [s in W_i]

with ``w_i = 1 / (validation_mse_i + 1e-6)``.
"""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

from ._parallel import parallel_map
from .archive import read_archive, read_manifest, write_archive
from .convlstm import (
    RegionModel,
    SkippedRegion,
    TrainConfig,
    load_region_model,
    predict_region,
    save_region_model,
    train_region,
)
from .cube import GridSpec, SpaceTimeCube, SplitIndex

WEIGHT_EPS = 1e-6


class EnsembleError(ValueError):
    pass


class UncoveredCellError(EnsembleError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"road cell {cell} is covered by no window and no fallback is configured")


@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise EnsembleError(f"empty window {self}")

    def contains(self, x, y):
        return self.x0 <= x < self.x0 + self.width and self.y0 <= y < self.y0 + self.height

    @property
    def slices(self):
        return slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width)


@dataclass
class CoverageReport:
    counts: np.ndarray
    uncovered: List[tuple]

    @property
    def fully_covered(self):
        return not self.uncovered


def partition(grid: GridSpec, window_size=(10, 10), stride=(5, 5)):
    """Windows anchored at ``(a*sx, b*sy)`` inside the grid, clipped at its edge."""
    (ww, wh), (sx, sy) = window_size, stride
    if min(ww, wh) < 1 or min(sx, sy) < 1:
        raise EnsembleError("window size and stride must be >= 1")
    windows = []
    for y0 in range(0, grid.height, sy):
        for x0 in range(0, grid.width, sx):
            windows.append(Window(x0, y0, min(ww, grid.width - x0), min(wh, grid.height - y0)))
    counts = np.zeros((grid.height, grid.width), dtype=int)
    for w in windows:
        counts[w.slices] += 1
    uncovered = [(int(x), int(y)) for y, x in np.argwhere(counts == 0)]
    return windows, CoverageReport(counts, uncovered)


@dataclass
class WindowModel:
    window: Window
    index: int
    model: RegionModel
    weight: float
    validation_mse: float


@dataclass
class Ensemble:
    grid_shape: tuple
    models: List[WindowModel]
    skipped: List[dict] = field(default_factory=list)


def window_weight(validation_mse):
    return 1.0 / (validation_mse + WEIGHT_EPS)


def _train_one(args):
    index, window, region, split, cfg = args
    return index, window, train_region(region, split, cfg)


def train_ensemble(cube: SpaceTimeCube, split: SplitIndex, windows: Sequence[Window], cfg: TrainConfig,
                   seed_base=0, workers=1, drop_factor=None, progress=None) -> Ensemble:
    """Train one ConvLSTM per window; window ``i`` uses seed ``seed_base + i``.

    ``drop_factor`` optionally drops models whose validation MSE exceeds
    ``drop_factor`` times the median over trained windows.
    """
    jobs = []
    skipped = []
    for i, w in enumerate(windows):
        region = cube.window(w.x0, w.y0, w.width, w.height)
        if not region.grid.road_mask.any():
            skipped.append({"index": i, "window": dataclasses.asdict(w), "reason": "no road cells"})
            continue
        jobs.append((i, w, region, split, dataclasses.replace(cfg, seed=seed_base + i)))
    if not jobs:
        raise EnsembleError("every window is roadless")

    models = []
    for i, w, result in parallel_map(_train_one, jobs, workers):
        if isinstance(result, SkippedRegion):
            skipped.append({"index": i, "window": dataclasses.asdict(w), "reason": result.reason})
            continue
        models.append(WindowModel(w, i, result, window_weight(result.validation_mse), result.validation_mse))
        if progress is not None:
            progress(i, len(windows))
    if not models:
        raise EnsembleError("no window could be trained")

    if drop_factor is not None:
        median = float(np.median([m.validation_mse for m in models]))
        kept = []
        for m in models:
            if m.validation_mse > drop_factor * median:
                skipped.append({"index": m.index, "window": dataclasses.asdict(m.window),
                                "reason": f"validation MSE {m.validation_mse:.6g} > {drop_factor} x median"})
            else:
                kept.append(m)
        models = kept
    skipped.sort(key=lambda s: s["index"])
    return Ensemble((cube.grid.height, cube.grid.width), models, skipped)


_SPLITTER = 134217729.0  # 2**27 + 1


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _two_prod(a, b):
    """``a*b`` as ``hi + lo`` without rounding loss."""
    p = a * b
    ca = _SPLITTER * a
    a_hi = ca - (ca - a)
    a_lo = a - a_hi
    cb = _SPLITTER * b
    b_hi = cb - (cb - b)
    b_lo = b - b_hi
    return p, ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo


def combine(models: Sequence[WindowModel], predictions, shape, mask=None, fallback=None):
    """Weighted per-cell average of window predictions.

    ``predictions[i]`` is ``(n_weeks, h_i, w_i)`` for ``models[i]``'s window
    (or ``(h_i, w_i)`` for a single week); ``shape`` is the grid ``(H, W)``.
    The normalizer runs over the models covering each cell. Road cells with
    no covering model take ``fallback`` (same shape as the output) or raise
    UncoveredCellError. Cells outside ``mask`` are NaN.

    Sums are carried in double-double so the average is close to correctly
    rounded, then clipped to the covering predictions' range so one model,
    or agreeing models, pass through unchanged.
    """
    if len(models) != len(predictions):
        raise EnsembleError("need one prediction per model")
    single = bool(predictions) and np.ndim(predictions[0]) == 2
    preds = [np.asarray(p, dtype=np.float64)[None] if single else np.asarray(p, dtype=np.float64)
             for p in predictions]
    n_weeks = preds[0].shape[0] if preds else (1 if fallback is None else np.shape(fallback)[0])
    H, W = shape
    num, num_lo = np.zeros((n_weeks, H, W)), np.zeros((n_weeks, H, W))
    den, den_lo = np.zeros((n_weeks, H, W)), np.zeros((n_weeks, H, W))
    lo = np.full((n_weeks, H, W), np.inf)
    hi = np.full((n_weeks, H, W), -np.inf)
    for m, p in zip(models, preds):
        if p.shape != (n_weeks, m.window.height, m.window.width):
            raise EnsembleError(f"prediction for window {m.index} has shape {p.shape}")
        if not m.weight > 0:
            raise EnsembleError(f"window {m.index} has non-positive weight {m.weight}")
        ys, xs = m.window.slices
        ok = ~np.isnan(p)
        w = np.where(ok, m.weight, 0.0)
        ph, pl = _two_prod(w, np.where(ok, p, 0.0))
        num[:, ys, xs], err = _two_sum(num[:, ys, xs], ph)
        num_lo[:, ys, xs] += err + pl
        den[:, ys, xs], err = _two_sum(den[:, ys, xs], w)
        den_lo[:, ys, xs] += err
        lo[:, ys, xs] = np.where(ok, np.minimum(lo[:, ys, xs], p), lo[:, ys, xs])
        hi[:, ys, xs] = np.where(ok, np.maximum(hi[:, ys, xs], p), hi[:, ys, xs])
    mask = np.ones((H, W), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    out = np.full((n_weeks, H, W), np.nan)
    covered = den > 0
    avg = (num[covered] + num_lo[covered]) / (den[covered] + den_lo[covered])
    out[covered] = np.clip(avg, lo[covered], hi[covered])
    gap = ~covered & mask[None]
    if gap.any():
        if fallback is None:
            _, y, x = np.argwhere(gap)[0]
            raise UncoveredCellError((int(x), int(y)))
        fb = np.asarray(fallback, dtype=np.float64)
        fb = fb[None] if single and fb.ndim == 2 else fb
        out[gap] = fb[gap]
    out[:, ~mask] = np.nan
    return out[0] if single else out


@dataclass
class ForecastGrid:
    """Predicted EPDO for a run of weeks: ``values[k]`` is the map for ``weeks[k]``."""

    values: np.ndarray
    weeks: tuple
    label: str = "forecast"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.weeks = tuple(int(w) for w in self.weeks)
        if self.values.ndim != 3 or self.values.shape[0] != len(self.weeks):
            raise EnsembleError(f"forecast values {self.values.shape} do not match {len(self.weeks)} weeks")

    @property
    def shape(self):
        return self.values.shape[1:]


def persistence_forecast(cube: SpaceTimeCube, weeks):
    """Each week predicted by the previous observed week."""
    weeks = np.asarray(list(weeks), dtype=int)
    if weeks.size and weeks.min() < 1:
        raise EnsembleError("persistence needs at least one observed week")
    return cube.target[weeks - 1].copy()


def _predict_one(args):
    wm, region, weeks = args
    return predict_region(wm.model, region, weeks)


def predict_ensemble(ensemble: Ensemble, cube: SpaceTimeCube, weeks, fallback="persistence", workers=1,
                     label="ensemble") -> ForecastGrid:
    weeks = list(weeks)
    if (cube.grid.height, cube.grid.width) != tuple(ensemble.grid_shape):
        raise EnsembleError(f"ensemble was trained on a {ensemble.grid_shape} grid, cube is "
                            f"{(cube.grid.height, cube.grid.width)}")
    jobs = [(m, cube.window(m.window.x0, m.window.y0, m.window.width, m.window.height), weeks)
            for m in ensemble.models]
    preds = parallel_map(_predict_one, jobs, workers)
    fb = None
    if fallback == "persistence":
        fb = persistence_forecast(cube, weeks)
    elif fallback is not None:
        raise EnsembleError(f"unknown fallback {fallback!r}")
    values = combine(ensemble.models, preds, ensemble.grid_shape, cube.grid.road_mask, fb)
    return ForecastGrid(values, weeks, label)


# ---------------------------------------------------------------------------
# files

FORECAST_COLUMNS = ("cell_x", "cell_y", "week_index", "prediction")


def write_forecast_csv(path, forecast: ForecastGrid):
    """One row per cell and week; null cells carry an empty prediction."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FORECAST_COLUMNS)
        H, W = forecast.shape
        for k, week in enumerate(forecast.weeks):
            vals = forecast.values[k]
            for y in range(H):
                for x in range(W):
                    v = vals[y, x]
                    w.writerow([x, y, week, "" if math.isnan(v) else repr(float(v))])


def read_forecast_csv(path, shape, label=None) -> ForecastGrid:
    H, W = shape
    cells = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FORECAST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise EnsembleError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            try:
                x, y, week = int(row["cell_x"]), int(row["cell_y"]), int(row["week_index"])
                v = float(row["prediction"]) if row["prediction"].strip() else math.nan
            except ValueError:
                raise EnsembleError(f"{path}: line {reader.line_num}: malformed row") from None
            if not (0 <= x < W and 0 <= y < H):
                raise EnsembleError(f"{path}: line {reader.line_num}: cell ({x}, {y}) outside {W}x{H} grid")
            cells[(week, y, x)] = v
    weeks = sorted({k[0] for k in cells})
    index = {w: i for i, w in enumerate(weeks)}
    values = np.full((len(weeks), H, W), np.nan)
    for (week, y, x), v in cells.items():
        values[index[week], y, x] = v
    return ForecastGrid(values, weeks, label or Path(path).stem)


def save_ensemble(path, ensemble: Ensemble, extra_meta=None):
    path = Path(path)
    entries = []
    for m in ensemble.models:
        sub = f"window_{m.index:04d}"
        save_region_model(path / sub, m.model)
        entries.append({"index": m.index, "window": dataclasses.asdict(m.window), "weight": m.weight,
                        "validation_mse": m.validation_mse, "archive": sub})
    meta = {"grid_shape": list(ensemble.grid_shape), "models": entries, "skipped": ensemble.skipped,
            "weight_rule": f"1/(validation_mse+{WEIGHT_EPS})"}
    if extra_meta:
        meta.update(extra_meta)
    return write_archive(path, {}, meta, kind="ensemble")


def load_ensemble(path) -> Ensemble:
    path = Path(path)
    _, meta = read_archive(path, kind="ensemble")
    models = []
    for e in meta["models"]:
        model = load_region_model(path / e["archive"])
        models.append(WindowModel(Window(**e["window"]), int(e["index"]), model, float(e["weight"]),
                                  float(e["validation_mse"])))
    return Ensemble(tuple(meta["grid_shape"]), models, list(meta["skipped"]))


def ensemble_meta(path):
    return read_manifest(path)["meta"]
