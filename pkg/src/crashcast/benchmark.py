"""The heterogeneous synthetic benchmark: a 32x32 grid over 209 weeks with
three planted regimes (gradually increasing low, volatile high, stable low).
"""
import time
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .baselines import arima_forecast_grid, fit_lr, predict_lr
from .convlstm import TrainConfig, predict_region, train_region
from .cube import GridSpec, Regime, SpaceTimeCube, chronological_split, regime_map, synth_cube
from .ensemble import ForecastGrid, partition, predict_ensemble, train_ensemble
from .evaluation import ModelScore, score

BENCH_WIDTH = 32
BENCH_HEIGHT = 32
BENCH_WEEKS = 209
BENCH_TEST_WEEKS = 52
BENCH_VALIDATION_FRACTION = 0.10


def benchmark_regimes():
    return [
        Regime(0, 0, 16, 32, level=0.3, slope=0.003, amplitude=0.15, noise=0.15, name="increasing-low"),
        Regime(16, 0, 16, 16, level=3.0, slope=0.0, amplitude=1.5, noise=0.8, name="volatile-high"),
        Regime(16, 16, 16, 16, level=0.6, slope=0.0, amplitude=0.05, noise=0.1, name="stable-low"),
    ]


def benchmark_grid(seed=0, roadless_fraction=0.03, cell_size_miles=5.0):
    rng = np.random.default_rng(seed)
    roads = rng.uniform(0.5, 3.0, (BENCH_HEIGHT, BENCH_WIDTH))
    roads[rng.random((BENCH_HEIGHT, BENCH_WIDTH)) < roadless_fraction] = 0.0
    return GridSpec(BENCH_WIDTH, BENCH_HEIGHT, cell_size_miles, roads)


def benchmark_cube(seed=0) -> SpaceTimeCube:
    return synth_cube(benchmark_grid(seed), BENCH_WEEKS, benchmark_regimes(), seed)


@dataclass
class BenchmarkResult:
    scores: Dict[str, ModelScore]
    seconds: Dict[str, float]
    labels: np.ndarray

    def mse(self, name):
        return self.scores[name].overall.mse


def run_benchmark(seed=0, cfg: TrainConfig = None, window=(10, 10), stride=(5, 5), arima_order=(1, 0, 1),
                  lr_lookback=8, workers=1) -> BenchmarkResult:
    """Fit LR, per-cell ARIMA, one whole-grid ConvLSTM and the window ensemble
    on the benchmark cube and score all four on the test weeks."""
    cfg = TrainConfig(seed=seed) if cfg is None else cfg
    cube = benchmark_cube(seed)
    split = chronological_split(BENCH_WEEKS, BENCH_TEST_WEEKS, BENCH_VALIDATION_FRACTION)
    weeks = list(split.test_weeks)
    labels = regime_map(cube.grid, benchmark_regimes())
    labels = np.where(cube.grid.road_mask, labels, -1)
    forecasts, seconds = {}, {}

    t0 = time.perf_counter()
    forecasts["LR"] = predict_lr(fit_lr(cube, split, lr_lookback), cube, weeks)
    seconds["LR"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    forecasts["ARIMA"], _ = arima_forecast_grid(cube, split, weeks, arima_order, workers)
    seconds["ARIMA"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    forecasts["ConvLSTM"] = predict_region(train_region(cube, split, cfg), cube, weeks)
    seconds["ConvLSTM"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    windows, _ = partition(cube.grid, window, stride)
    ens = train_ensemble(cube, split, windows, cfg, seed_base=cfg.seed, workers=workers)
    forecasts["Ensemble"] = predict_ensemble(ens, cube, weeks, workers=workers).values
    seconds["Ensemble"] = time.perf_counter() - t0

    scores = {k: score(ForecastGrid(v, weeks, k), cube, labels) for k, v in forecasts.items()}
    return BenchmarkResult(scores, seconds, labels)
