import functools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crashcast import evaluation as ev
from crashcast.cube import GridSpec, Regime, SpaceTimeCube, regime_map, synth_cube
from crashcast.ensemble import ForecastGrid

series_st = arrays(np.float64, st.integers(1, 12), elements=st.floats(-10, 10))


def dtw_oracle(a, b):
    """Minimum over monotone alignment paths, by memoized recursion."""
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        cost = abs(a[i] - b[j])
        if i == 0 and j == 0:
            return cost
        steps = []
        if i > 0:
            steps.append(d(i - 1, j))
        if j > 0:
            steps.append(d(i, j - 1))
        if i > 0 and j > 0:
            steps.append(d(i - 1, j - 1))
        return cost + min(steps)

    return d(len(a) - 1, len(b) - 1)


def simple_cube(target):
    T, H, W = target.shape
    return SpaceTimeCube(GridSpec.uniform(W, H), target, {})


class TestScore:
    def test_perfect_forecast(self):
        cube = simple_cube(np.random.default_rng(0).uniform(0, 2, (6, 3, 3)))
        s = ev.score(ForecastGrid(cube.target[3:], range(3, 6)), cube, labels=np.zeros((3, 3), dtype=int))
        assert s.overall.mse == 0 and s.overall.rmse == 0
        assert s.clusters[0].mse == 0

    @pytest.mark.parametrize("mse,quoted_rmse", [(0.103, 0.321), (0.7259, 0.852), (0.2948, 0.543), (0.1096, 0.331)])
    def test_table_pairs_consistent(self, mse, quoted_rmse):
        assert abs(ev.rmse(mse) - quoted_rmse) < 5e-4

    def test_nulls_excluded_and_clusters(self):
        roads = np.array([[1.0, 0.0, 1.0]])
        truth = np.array([[[1.0, np.nan, 2.0]], [[0.0, np.nan, 4.0]]])
        cube = SpaceTimeCube(GridSpec(3, 1, 5.0, roads), truth, {})
        pred = np.array([[[2.0, 7.0, 2.0]], [[0.0, 7.0, 1.0]]])
        s = ev.score(ForecastGrid(pred, [0, 1]), cube, labels=np.array([[0, -1, 1]]))
        assert s.overall.pairs == 4
        assert s.overall.mse == (1 + 0 + 0 + 9) / 4
        assert s.clusters[0].mse == 0.5 and s.clusters[1].mse == 4.5

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 2, 2), elements=st.floats(0, 5)), arrays(np.float64, (3, 2, 2), elements=st.floats(0, 5)))
    def test_rmse_squared_is_mse(self, a, b):
        s = ev.score(ForecastGrid(a, range(3)), simple_cube(b)).overall
        assert abs(s.rmse ** 2 - s.mse) <= 1e-9

    def test_no_pairs(self):
        cube = SpaceTimeCube(GridSpec(1, 1, 5.0, np.zeros((1, 1))), np.full((2, 1, 1), np.nan), {})
        with pytest.raises(ev.EvaluationError):
            ev.score(ForecastGrid(np.zeros((1, 1, 1)), [1]), cube)

    def test_shape_mismatch(self):
        with pytest.raises(ev.EvaluationError):
            ev.score(ForecastGrid(np.zeros((1, 2, 2)), [0]), simple_cube(np.zeros((2, 3, 3))))

    def test_report_table_and_json(self):
        cube = simple_cube(np.ones((4, 2, 2)))
        rep = ev.EvalReport(meta={"seed": 0})
        rep.models["m"] = ev.score(ForecastGrid(np.zeros((2, 2, 2)), [2, 3]), cube, labels=np.array([[0, 0], [1, -1]]))
        assert "c0 RMSE" in rep.table() and "1.0000" in rep.table()
        data = json.loads(rep.to_json())
        assert data["models"]["m"]["all_regions"]["mse"] == 1.0


class TestHotspots:
    def test_unique_max(self):
        risk = np.zeros((5, 5))
        risk[3, 2] = 9.0
        np.testing.assert_array_equal(ev.hotspot_points(risk, 1, cell_size=5.0), [[12.5, 17.5]])

    def test_ties_in_row_major_order(self):
        np.testing.assert_array_equal(ev.hotspot_points(np.ones((2, 3)), 2), [[0.5, 0.5], [1.5, 0.5]])

    def test_all_cells(self):
        mask = np.array([[True, False], [True, True]])
        pts = ev.hotspot_points(np.arange(4.0).reshape(2, 2), 3, 2.0, mask)
        assert sorted(map(tuple, pts)) == [(1.0, 1.0), (1.0, 3.0), (3.0, 3.0)]

    def test_zero(self):
        assert ev.hotspot_points(np.ones((2, 2)), 0).shape == (0, 2)

    def test_too_many(self):
        with pytest.raises(ev.EvaluationError):
            ev.hotspot_points(np.ones((1, 2)), 3)


class TestCrossK:
    def test_single_point(self):
        np.testing.assert_array_equal(ev.cross_k([[1.0, 1.0]], [[1.0, 1.0]], 100.0, [0.0, 1.0, 50.0]), 100.0)

    def test_two_points(self):
        np.testing.assert_array_equal(ev.cross_k([[0.0, 0.0]], [[3.0, 0.0]], 100.0, [2.0, 4.0]), [0.0, 100.0])

    def test_empty(self):
        with pytest.raises(ev.EvaluationError):
            ev.cross_k(np.zeros((0, 2)), [[0.0, 0.0]], 1.0, [1.0])

    def test_descending_radii(self):
        with pytest.raises(ev.EvaluationError):
            ev.cross_k([[0.0, 0.0]], [[0.0, 0.0]], 1.0, [2.0, 1.0])

    def test_random_sets(self):
        rng = np.random.default_rng(0)
        radii = np.linspace(0, 60, 25)
        for _ in range(100):
            a = rng.uniform(0, 40, (rng.integers(1, 30), 2))
            b = rng.uniform(0, 40, (rng.integers(1, 30), 2))
            k = ev.cross_k(a, b, 1600.0, radii)
            assert np.all(np.diff(k) >= 0)
            np.testing.assert_array_equal(k, ev.cross_k(b, a, 1600.0, radii))
            assert abs(ev.cross_k(a, b, 1600.0, [0.0, 40 * math.sqrt(2) + 1])[-1] - 1600.0) < 1e-9
            # brute-force pair count
            r = float(rng.uniform(0, 30))
            count = sum(np.hypot(*(p - q)) <= r for p in a for q in b)
            assert ev.cross_k(a, b, 1600.0, [r])[0] == pytest.approx(1600.0 * count / (len(a) * len(b)), rel=1e-12)

    def test_default_radii(self):
        np.testing.assert_array_equal(ev.default_radii(), np.arange(0, 51, 5.0))


class TestCrossKEvaluate:
    def setup_method(self):
        rng = np.random.default_rng(1)
        t = (rng.uniform(size=(4, 8, 8)) > 0.8) * rng.uniform(1, 2, (4, 8, 8))
        self.cube = simple_cube(t)

    def test_perfect_equals_actual_vs_actual(self):
        fc = ForecastGrid(self.cube.target, range(4))
        curve = ev.crossk_evaluate(fc, self.cube, [0.0, 5.0, 10.0])
        expected = []
        for k in range(4):
            ys, xs = np.nonzero(self.cube.target[k] > 0)
            pts = ev.cell_centroids(np.column_stack((xs, ys)), 5.0)
            expected.append(ev.cross_k(pts, pts, self.cube.grid.area_sq_miles, [0.0, 5.0, 10.0]))
        np.testing.assert_allclose(curve.values, np.mean(expected, axis=0), rtol=1e-14)
        assert curve.weeks_used == 4

    def test_far_forecast_scores_zero(self):
        t = np.zeros((1, 1, 40))
        t[0, 0, :2] = 1.0
        cube = simple_cube(t)
        pred = np.zeros((1, 1, 40))
        pred[0, 0, -2:] = 5.0
        curve = ev.crossk_evaluate(ForecastGrid(pred, [0]), cube, [0.0, 10.0, 50.0])
        np.testing.assert_array_equal(curve.values, 0.0)

    def test_aligned_beats_shifted(self):
        fc_good = ForecastGrid(self.cube.target + 0.01, range(4))
        shifted = np.roll(self.cube.target, 4, axis=2)
        fc_bad = ForecastGrid(shifted, range(4))
        good = ev.crossk_evaluate(fc_good, self.cube, [0.0, 5.0])
        bad = ev.crossk_evaluate(fc_bad, self.cube, [0.0, 5.0])
        assert good.values[0] > bad.values[0]

    def test_no_positive_week(self):
        cube = simple_cube(np.zeros((2, 2, 2)))
        with pytest.raises(ev.EvaluationError):
            ev.crossk_evaluate(ForecastGrid(np.zeros((2, 2, 2)), [0, 1]), cube)


class TestDtw:
    def test_examples(self):
        assert ev.dtw([0, 0], [1, 1]) == 2.0
        assert ev.dtw([1], [1, 1, 1]) == 0.0

    def test_empty(self):
        with pytest.raises(ev.EvaluationError):
            ev.dtw([], [1.0])

    @settings(max_examples=200, deadline=None)
    @given(series_st, series_st)
    def test_matches_recursion(self, a, b):
        assert ev.dtw(a, b) == pytest.approx(dtw_oracle(tuple(a), tuple(b)), rel=1e-12, abs=1e-12)

    def test_axioms_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n = int(rng.integers(1, 40))
            a, b = rng.normal(size=n), rng.normal(size=n)
            assert ev.dtw(a, a) == 0.0
            assert ev.dtw(a, b) == ev.dtw(b, a)
            assert 0.0 <= ev.dtw(a, b) <= np.abs(a - b).sum() + 1e-12

    def test_matrix(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=(6, 10))
        m = ev.dtw_matrix(s)
        for i in range(6):
            for j in range(6):
                assert m[i, j] == ev.dtw(s[i], s[j])


class TestKMedoids:
    def test_two_obvious_groups(self):
        pts = np.array([0.0, 0.1, 0.2, 10.0, 10.1, 10.2])
        dist = np.abs(pts[:, None] - pts[None, :])
        medoids, assign = ev.k_medoids(dist, 2, seed=3)
        assert sorted(medoids.tolist()) == [1, 4]
        assert len(set(assign[:3])) == 1 and len(set(assign[3:])) == 1 and assign[0] != assign[3]

    def test_medoid_carries_own_label(self):
        rng = np.random.default_rng(2)
        for seed in range(20):
            x = rng.normal(size=(15, 2))
            dist = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
            medoids, assign = ev.k_medoids(dist, 3, seed=seed)
            assert list(assign[medoids]) == [0, 1, 2]
            assert np.all(dist[medoids[assign], np.arange(15)] == dist[medoids].min(axis=0))

    def test_bad_k(self):
        with pytest.raises(ev.EvaluationError):
            ev.k_medoids(np.zeros((3, 3)), 4)


class TestClusterDtw:
    def test_recovers_regimes(self):
        g = GridSpec.uniform(8, 8)
        regs = [Regime(0, 0, 4, 8, level=0.3, slope=0.01, amplitude=0.1, noise=0.1),
                Regime(4, 0, 4, 4, level=3.0, amplitude=1.5, noise=0.8),
                Regime(4, 4, 4, 4, level=0.8, noise=0.05)]
        cube = synth_cube(g, 60, regs, seed=0)
        labels = ev.cluster_dtw(cube, k=3, seed=0)
        assert ev.label_agreement(labels, regime_map(g, regs)) >= 0.9
        np.testing.assert_array_equal(labels, ev.cluster_dtw(cube, k=3, seed=0))

    def test_roadless_unlabeled(self):
        roads = np.ones((2, 3))
        roads[0, 0] = 0.0
        cube = synth_cube(GridSpec(3, 2, 5.0, roads), 10, [Regime(0, 0, 3, 2, level=1.0, noise=0.5)], 0)
        labels = ev.cluster_dtw(cube, k=2)
        assert labels[0, 0] == -1 and np.all(labels[roads > 0] >= 0)

    def test_k_too_large(self):
        cube = synth_cube(GridSpec.uniform(2, 1), 5, [Regime(0, 0, 2, 1, level=1.0)], 0)
        with pytest.raises(ev.EvaluationError):
            ev.cluster_dtw(cube, k=3)

    def test_label_agreement_permutation(self):
        assert ev.label_agreement([0, 0, 1, 2], [2, 2, 0, 1]) == 1.0
        assert ev.label_agreement([0, 1, 1, 1], [0, 0, 0, 0]) == 0.75


class TestFiles:
    def test_labels_round_trip(self, tmp_path):
        labels = np.array([[0, -1], [2, 1]])
        ev.write_labels_csv(tmp_path / "l.csv", labels)
        np.testing.assert_array_equal(ev.read_labels_csv(tmp_path / "l.csv", (2, 2)), labels)

    def test_crossk_csv(self, tmp_path):
        ev.write_crossk_csv(tmp_path / "k.csv", ev.CrossKCurve(np.array([0.0, 5.0]), np.array([1.5, 2.25])))
        assert (tmp_path / "k.csv").read_text() == "r,K\n0.0,1.5\n5.0,2.25\n"
