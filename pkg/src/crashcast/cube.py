"""Grid geometry, crash records and the space-time cube.

Cells are addressed by integer ``(x, y)`` with ``0 <= x < width`` and
``0 <= y < height``; the flat cell index is ``y * width + x``. The target is
held as a ``(T, height, width)`` float64 array with NaN for cells that have no
road; ``SpaceTimeCube.matrix()`` gives the ``n x T`` view.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .archive import read_archive, write_archive

SEVERITY_CODES = ("K", "A", "B", "C", "O")


class CubeError(ValueError):
    pass


class RecordError(CubeError):
    """A crash record or CSV row that cannot be used."""


def _frozen(arr):
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    cell_size_miles: float
    road_length_miles: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise CubeError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not self.cell_size_miles > 0:
            raise CubeError(f"cell_size_miles must be positive, got {self.cell_size_miles}")
        roads = _frozen(self.road_length_miles)
        if roads.shape != (self.height, self.width):
            raise CubeError(
                f"road_length_miles must have shape ({self.height}, {self.width}), got {roads.shape}"
            )
        if np.any(~np.isfinite(roads)) or np.any(roads < 0):
            raise CubeError("road lengths must be finite and nonnegative")
        object.__setattr__(self, "road_length_miles", roads)

    @classmethod
    def uniform(cls, width, height, cell_size_miles=5.0, road_length=1.0):
        return cls(width, height, cell_size_miles, np.full((height, width), float(road_length)))

    @property
    def n(self):
        return self.width * self.height

    @property
    def road_mask(self):
        return self.road_length_miles > 0

    @property
    def area_sq_miles(self):
        return self.n * self.cell_size_miles ** 2

    def sub(self, x0, y0, width, height):
        """The grid restricted to a rectangle of cells."""
        return GridSpec(
            width, height, self.cell_size_miles,
            self.road_length_miles[y0:y0 + height, x0:x0 + width],
        )

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            (self.width, self.height, self.cell_size_miles)
            == (other.width, other.height, other.cell_size_miles)
            and np.array_equal(self.road_length_miles, other.road_length_miles)
        )

    __hash__ = None


@dataclass(frozen=True)
class CrashRecord:
    week_index: int
    cell_x: int
    cell_y: int
    severity: str
    inclement_weather: bool


@dataclass(frozen=True)
class SeverityWeights:
    K: float
    A: float
    B: float
    C: float
    O: float = 1.0

    def __post_init__(self):
        if self.O != 1.0:
            raise CubeError(f"weight for O must be 1, got {self.O}")
        w = [self.K, self.A, self.B, self.C, self.O]
        if any(not (x > 0 and math.isfinite(x)) for x in w):
            raise CubeError("severity weights must be positive and finite")
        if any(a < b for a, b in zip(w, w[1:])):
            raise CubeError("severity weights must satisfy K >= A >= B >= C >= O")

    def __getitem__(self, code):
        if code not in SEVERITY_CODES:
            raise KeyError(code)
        return getattr(self, code)

    def as_dict(self):
        return {c: getattr(self, c) for c in SEVERITY_CODES}


@dataclass(frozen=True)
class SpaceTimeCube:
    grid: GridSpec
    target: np.ndarray = field(repr=False)
    features: dict = field(default_factory=dict, repr=False)
    week_labels: Optional[tuple] = None

    def __post_init__(self):
        target = _frozen(self.target)
        g = self.grid
        if target.ndim != 3 or target.shape[1:] != (g.height, g.width):
            raise CubeError(f"target must be (T, {g.height}, {g.width}), got {target.shape}")
        mask = g.road_mask
        if np.any(np.isnan(target[:, mask])):
            raise CubeError("road cells must not hold null values")
        if np.any(~np.isnan(target[:, ~mask])):
            raise CubeError("cells without roads must hold null values")
        if np.any(target[:, mask] < 0):
            raise CubeError("target values must be nonnegative")
        feats = {}
        for name, arr in self.features.items():
            arr = _frozen(arr)
            if arr.shape != (g.height, g.width):
                raise CubeError(f"feature {name!r} must have shape ({g.height}, {g.width}), got {arr.shape}")
            feats[str(name)] = arr
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "features", feats)
        if self.week_labels is not None:
            labels = tuple(str(x) for x in self.week_labels)
            if len(labels) != target.shape[0]:
                raise CubeError("week_labels must have one entry per week")
            object.__setattr__(self, "week_labels", labels)

    @property
    def T(self):
        return self.target.shape[0]

    @property
    def feature_names(self):
        return sorted(self.features)

    def feature_stack(self):
        """Static features as an ``(m, H, W)`` array in sorted-name order."""
        names = self.feature_names
        if not names:
            return np.zeros((0, self.grid.height, self.grid.width))
        return np.stack([self.features[n] for n in names])

    def matrix(self):
        """The target as an ``n x T`` matrix, cell index ``y * width + x``."""
        return self.target.reshape(self.T, -1).T.copy()

    def window(self, x0, y0, width, height):
        """Sub-cube over a rectangle of cells (all weeks)."""
        return SpaceTimeCube(
            self.grid.sub(x0, y0, width, height),
            self.target[:, y0:y0 + height, x0:x0 + width],
            {k: v[y0:y0 + height, x0:x0 + width] for k, v in self.features.items()},
            self.week_labels,
        )

    def __eq__(self, other):
        if not isinstance(other, SpaceTimeCube):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.target, other.target, equal_nan=True)
            and self.features.keys() == other.features.keys()
            and all(np.array_equal(self.features[k], other.features[k]) for k in self.features)
            and self.week_labels == other.week_labels
        )

    __hash__ = None


@dataclass(frozen=True)
class SplitIndex:
    train_weeks: range
    validation_weeks: range
    test_weeks: range

    @property
    def T(self):
        return self.test_weeks.stop

    def counts(self):
        return len(self.train_weeks), len(self.validation_weeks), len(self.test_weeks)


# ---------------------------------------------------------------------------

def build_cube(records: Sequence[CrashRecord], grid: GridSpec, weights: SeverityWeights, T: int,
               features=None, week_labels=None) -> SpaceTimeCube:
    """Aggregate weather-related crashes into a road-length normalized EPDO cube."""
    if T < 1:
        raise CubeError(f"T must be positive, got {T}")
    epdo = np.zeros((T, grid.height, grid.width))
    weeks, ys, xs, ws = [], [], [], []
    for i, r in enumerate(records):
        if not (0 <= r.cell_x < grid.width and 0 <= r.cell_y < grid.height):
            raise RecordError(f"record {i}: cell ({r.cell_x}, {r.cell_y}) outside {grid.width}x{grid.height} grid")
        if not 0 <= r.week_index < T:
            raise RecordError(f"record {i}: week {r.week_index} outside [0, {T})")
        if r.severity not in SEVERITY_CODES:
            raise RecordError(f"record {i}: unknown severity {r.severity!r}")
        if not r.inclement_weather:
            continue
        weeks.append(r.week_index)
        ys.append(r.cell_y)
        xs.append(r.cell_x)
        ws.append(weights[r.severity])
    if weeks:
        np.add.at(epdo, (np.array(weeks), np.array(ys), np.array(xs)), np.array(ws, dtype=np.float64))
    mask = grid.road_mask
    target = np.full_like(epdo, np.nan)
    target[:, mask] = epdo[:, mask] / grid.road_length_miles[mask]
    return SpaceTimeCube(grid, target, features or {}, week_labels)


def chronological_split(T: int, test_weeks: int, validation_fraction: float = 0.0) -> SplitIndex:
    if test_weeks < 0 or test_weeks >= T:
        raise CubeError(f"test_weeks must lie in [0, T={T}), got {test_weeks}")
    if not 0.0 <= validation_fraction < 1.0:
        raise CubeError(f"validation_fraction must lie in [0, 1), got {validation_fraction}")
    pre = T - test_weeks
    n_val = math.floor(validation_fraction * pre)
    n_train = pre - n_val
    return SplitIndex(range(0, n_train), range(n_train, pre), range(pre, T))


@dataclass(frozen=True)
class Regime:
    """A rectangular block of cells sharing one generating process."""

    x0: int
    y0: int
    width: int
    height: int
    level: float
    slope: float = 0.0
    amplitude: float = 0.0
    noise: float = 0.0
    name: str = ""


SEASON_WEEKS = 52


def regime_mean(regime: Regime, t):
    t = np.asarray(t, dtype=np.float64)
    return regime.level + regime.slope * t + regime.amplitude * np.sin(2 * np.pi * t / SEASON_WEEKS)


def regime_map(grid: GridSpec, regimes: Sequence[Regime]):
    """Integer ``(H, W)`` array giving each cell's regime index."""
    owner = np.full((grid.height, grid.width), -1, dtype=int)
    for i, r in enumerate(regimes):
        if r.width < 1 or r.height < 1:
            raise CubeError(f"regime {i} is empty")
        if r.x0 < 0 or r.y0 < 0 or r.x0 + r.width > grid.width or r.y0 + r.height > grid.height:
            raise CubeError(f"regime {i} extends outside the grid")
        block = owner[r.y0:r.y0 + r.height, r.x0:r.x0 + r.width]
        if np.any(block >= 0):
            raise CubeError(f"regime {i} overlaps regime {int(block[block >= 0][0])}")
        block[...] = i
    if np.any(owner < 0):
        y, x = np.argwhere(owner < 0)[0]
        raise CubeError(f"regimes do not cover cell ({x}, {y})")
    return owner


def synth_cube(grid: GridSpec, T: int, regimes: Sequence[Regime], seed: int) -> SpaceTimeCube:
    """Seeded synthetic cube: ``max(0, level + slope*t + amplitude*sin(2 pi t / 52) + noise)``.

    Two static features are attached: ``road_length`` (from the grid) and
    ``exposure``, a noisy per-cell proxy for the regime's mean level.
    """
    owner = regime_map(grid, regimes)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((T, grid.height, grid.width))
    t = np.arange(T)
    values = np.empty((T, grid.height, grid.width))
    noise_scale = np.empty((grid.height, grid.width))
    level = np.empty((grid.height, grid.width))
    for i, r in enumerate(regimes):
        sel = owner == i
        values[:, sel] = regime_mean(r, t)[:, None]
        noise_scale[sel] = r.noise
        level[sel] = r.level
    values = np.maximum(0.0, values + z * noise_scale)
    exposure = level * np.exp(0.1 * rng.standard_normal(level.shape))
    mask = grid.road_mask
    values[:, ~mask] = np.nan
    features = {"road_length": grid.road_length_miles, "exposure": exposure}
    return SpaceTimeCube(grid, values, features)


# ---------------------------------------------------------------------------
# files

CRASH_COLUMNS = ("week_index", "cell_x", "cell_y", "severity", "inclement_weather")


def _parse_int(value, column, line):
    try:
        return int(value)
    except (TypeError, ValueError):
        raise RecordError(f"line {line}: {column} must be an integer, got {value!r}") from None


def _parse_bool(value, line):
    v = (value or "").strip().lower()
    if v == "true":
        return True
    if v == "false":
        return False
    raise RecordError(f"line {line}: inclement_weather must be true or false, got {value!r}")


def load_crash_csv(path) -> list:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CRASH_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise RecordError(f"line 1: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            sev = (row["severity"] or "").strip()
            if sev not in SEVERITY_CODES:
                raise RecordError(f"line {line}: unknown severity code {sev!r}")
            records.append(CrashRecord(
                _parse_int(row["week_index"], "week_index", line),
                _parse_int(row["cell_x"], "cell_x", line),
                _parse_int(row["cell_y"], "cell_y", line),
                sev,
                _parse_bool(row["inclement_weather"], line),
            ))
    return records


def write_crash_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CRASH_COLUMNS)
        for r in records:
            w.writerow([r.week_index, r.cell_x, r.cell_y, r.severity, "true" if r.inclement_weather else "false"])


def load_features_csv(path, grid: GridSpec) -> dict:
    """Read ``cell_x,cell_y,feature_name,value`` rows; unlisted cells get 0."""
    feats = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = ("cell_x", "cell_y", "feature_name", "value")
        missing = [c for c in cols if c not in (reader.fieldnames or [])]
        if missing:
            raise RecordError(f"line 1: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            x = _parse_int(row["cell_x"], "cell_x", line)
            y = _parse_int(row["cell_y"], "cell_y", line)
            if not (0 <= x < grid.width and 0 <= y < grid.height):
                raise RecordError(f"line {line}: cell ({x}, {y}) outside the grid")
            try:
                value = float(row["value"])
            except (TypeError, ValueError):
                raise RecordError(f"line {line}: value must be a number, got {row['value']!r}") from None
            name = row["feature_name"].strip()
            feats.setdefault(name, np.zeros((grid.height, grid.width)))[y, x] = value
    return feats


def save_cube(path, cube: SpaceTimeCube, extra_meta=None):
    arrays = {"target": cube.target, "road_length": cube.grid.road_length_miles}
    for name in cube.feature_names:
        arrays[f"feature.{name}"] = cube.features[name]
    meta = {
        "width": cube.grid.width,
        "height": cube.grid.height,
        "cell_size_miles": cube.grid.cell_size_miles,
        "T": cube.T,
        "feature_names": cube.feature_names,
        "week_labels": list(cube.week_labels) if cube.week_labels is not None else None,
        "target_layout": "T,height,width",
    }
    if extra_meta:
        meta.update(extra_meta)
    return write_archive(path, arrays, meta, kind="cube")


def load_cube(path) -> SpaceTimeCube:
    arrays, meta = read_archive(path, kind="cube")
    grid = GridSpec(int(meta["width"]), int(meta["height"]), float(meta["cell_size_miles"]), arrays["road_length"])
    feats = {name: arrays[f"feature.{name}"] for name in meta["feature_names"]}
    labels = meta.get("week_labels")
    return SpaceTimeCube(grid, arrays["target"], feats, tuple(labels) if labels is not None else None)


def cube_meta(path):
    from .archive import read_manifest
    return read_manifest(path)["meta"]
