import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from slseg.evaluation import (
    CAMVID_GRID,
    TVUS_GRID,
    confusion_matrix,
    dice,
    jaccard,
    miou,
    paired_t_test,
    per_class_iou,
    pixel_rejection_curve,
    random_rejection_baseline,
    vanilla_ensemble_predict,
    write_curves_csv,
)
from slseg.net import NetConfig, StochasticSegNet, count_parameters


def t_two_sided_p(t, df):
    """Oracle: integrate the Student-t density over both tails."""
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))

    def pdf(x):
        return c * (1 + x * x / df) ** (-(df + 1) / 2)

    tail, _ = integrate.quad(pdf, abs(t), np.inf, epsabs=1e-13, epsrel=1e-12)
    return 2 * tail


class TestIoU:
    def test_perfect(self):
        y = np.array([0, 1, 2, 2, 1])
        assert miou(confusion_matrix(y, y, 3)) == 1.0

    def test_hand_counted(self):
        cm = confusion_matrix(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])
        np.testing.assert_allclose(per_class_iou(cm), [1 / 2, 2 / 3])
        assert miou(cm) == pytest.approx(7 / 12, abs=1e-15)

    def test_disjoint(self):
        assert miou(confusion_matrix(np.array([1, 1, 0]), np.array([0, 0, 1]), 2)) == 0.0

    def test_absent_class_excluded(self):
        cm = confusion_matrix(np.array([0, 1]), np.array([0, 1]), 5)
        assert miou(cm) == 1.0
        assert np.isnan(per_class_iou(cm)[2:]).all()

    def test_ignore_counted_separately(self):
        cm = confusion_matrix(np.array([0, 1, 1]), np.array([0, 255, 1]), 2)
        assert cm.total + cm.ignored == 3

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            miou(confusion_matrix(np.array([0]), np.array([255]), 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_relabel_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        perm = rng.permutation(4)
        assert miou(confusion_matrix(perm[p], perm[t], 4)) == pytest.approx(miou(confusion_matrix(p, t, 4)),
                                                                            abs=1e-15)


class TestDiceJaccard:
    def test_identical(self):
        m = np.array([1, 0, 1, 1], bool)
        assert dice(m, m) == jaccard(m, m) == 1.0

    def test_disjoint(self):
        assert dice([1, 0], [0, 1]) == jaccard([1, 0], [0, 1]) == 0.0

    def test_both_empty(self):
        assert dice([0, 0], [0, 0]) == jaccard([0, 0], [0, 0]) == 1.0

    def test_set_counts(self):
        a = np.zeros(10, bool)
        b = np.zeros(10, bool)
        a[:4] = True
        b[1:7] = True  # |A|=4, |B|=6, |A∩B|=3
        assert dice(a, b) == pytest.approx(0.6, abs=1e-15)
        assert jaccard(a, b) == pytest.approx(3 / 7, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros(3), np.zeros(4))

    def test_identity_over_random_masks(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a, b = rng.random((6, 6)) < rng.random(), rng.random((6, 6)) < rng.random()
            j = jaccard(a, b)
            assert dice(a, b) == pytest.approx(2 * j / (1 + j), abs=1e-12)


def noisy_prediction(seed, n=2000, classes=3, err=0.2):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, classes, n)
    pred = truth.copy()
    flip = rng.random(n) < err
    pred[flip] = rng.integers(0, classes, flip.sum())
    return pred, truth


class TestRejection:
    def test_grids(self):
        assert CAMVID_GRID == (0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2)
        assert TVUS_GRID == (0.0, 0.005, 0.01, 0.015, 0.02, 0.025, 0.03, 0.035, 0.04, 0.045, 0.05)

    def test_fraction_zero_is_base_metric(self):
        pred, truth = noisy_prediction(0)
        u = np.random.default_rng(1).random(pred.shape)
        c = pixel_rejection_curve(pred, truth, u, CAMVID_GRID)
        assert abs(c.scores[0] - miou(confusion_matrix(pred, truth, 3))) <= 1e-12

    def test_rejected_count_is_floor(self):
        pred, truth = noisy_prediction(2, n=997)
        u = np.random.default_rng(3).random(pred.shape)
        c = pixel_rejection_curve(pred, truth, u, CAMVID_GRID)
        assert c.rejected == [math.floor(f * 997) for f in CAMVID_GRID]

    def test_oracle_uncertainty_monotone_to_one(self):
        pred, truth = noisy_prediction(4, n=1000, err=0.1)
        u = (pred != truth).astype(float)
        errors = int(u.sum())
        grid = [0.0] + [i / 100 for i in range(1, 20)]
        c = pixel_rejection_curve(pred, truth, u, grid)
        assert all(b >= a for a, b in zip(c.scores, c.scores[1:]))
        for f, s in zip(grid, c.scores):
            if math.floor(f * 1000) >= errors:
                assert s == 1.0

    def test_ties_broken_by_index(self):
        pred = np.array([1, 0, 0, 0])
        truth = np.array([0, 0, 0, 0])
        u = np.array([1.0, 1.0, 0.0, 0.0])
        # 1 of 4 rejected: pixel 0 (the error) goes first
        c = pixel_rejection_curve(pred, truth, u, [0.0, 0.25], metric="accuracy")
        assert c.scores == [0.75, 1.0]

    def test_per_image_mode(self):
        pred = np.array([[1, 0, 0, 0], [0, 0, 0, 1]])
        truth = np.zeros((2, 4), int)
        u = np.array([[1.0, 0, 0, 0], [0, 0, 0, 1.0]])
        c = pixel_rejection_curve(pred, truth, u, [0.0, 0.25], metric="accuracy", per_image=True)
        assert c.rejected == [0, 2]
        assert c.scores[1] == 1.0

    @pytest.mark.parametrize("grid", [[0.0, 1.0], [0.1, 0.2], [0.0, 0.2, 0.1]])
    def test_bad_grids(self, grid):
        pred, truth = noisy_prediction(0, n=10)
        with pytest.raises(ValueError):
            pixel_rejection_curve(pred, truth, np.zeros(10), grid)

    def test_unnormalised_rejected(self):
        pred, truth = noisy_prediction(0, n=10)
        with pytest.raises(ValueError):
            pixel_rejection_curve(pred, truth, np.full(10, 3.0), [0.0])

    def test_random_baseline(self):
        pred, truth = noisy_prediction(5, n=4096)
        base = miou(confusion_matrix(pred, truth, 3))
        c = random_rejection_baseline(pred, truth, [0.0, 0.1], seed=0)
        assert c.scores[0] == base
        mean10 = np.mean([random_rejection_baseline(pred, truth, [0.0, 0.1], seed=s).scores[1] for s in range(20)])
        assert abs(mean10 - base) <= 0.02
        again = random_rejection_baseline(pred, truth, [0.0, 0.1], seed=0)
        assert again.scores == c.scores

    def test_csv(self, tmp_path):
        pred, truth = noisy_prediction(6, n=100)
        u = np.random.default_rng(0).random(100)
        curves = [pixel_rejection_curve(pred, truth, u, [0.0, 0.5]),
                  random_rejection_baseline(pred, truth, [0.0, 0.5], seed=1)]
        path = tmp_path / "c.csv"
        write_curves_csv(path, curves)
        lines = path.read_bytes().split(b"\n")
        assert lines[0] == b"fraction,miou,miou_random"
        assert b"\r" not in path.read_bytes()
        assert float(lines[1].split(b",")[1]) == curves[0].scores[0]


class TestVanillaEnsemble:
    def nets(self, k, same=False):
        return [StochasticSegNet(NetConfig(widths=(4, 4), bank_size=1, dtype="float64", seed=0 if same else s))
                for s in range(k)]

    def test_single_member(self):
        (net,) = self.nets(1)
        x = np.random.default_rng(0).random((2, 1, 8, 8))
        mean, var = vanilla_ensemble_predict([net], x)
        np.testing.assert_array_equal(mean, net.predict_proba(x, (0,) * net.num_banks))
        assert not var.values.any()

    def test_identical_members(self):
        nets = self.nets(3, same=True)
        x = np.random.default_rng(1).random((1, 8, 8))
        mean, var = vanilla_ensemble_predict(nets, x)
        np.testing.assert_array_equal(mean, nets[0].predict_proba(x[None], (0,) * nets[0].num_banks)[0])
        assert not var.values.any()

    def test_parameter_count_scales(self):
        nets = self.nets(5)
        assert sum(count_parameters(n) for n in nets) == 5 * count_parameters(nets[0])

    def test_topology_mismatch(self):
        a = StochasticSegNet(NetConfig(widths=(4, 4), bank_size=1))
        b = StochasticSegNet(NetConfig(widths=(4, 6), bank_size=1))
        with pytest.raises(ValueError):
            vanilla_ensemble_predict([a, b], np.zeros((1, 1, 8, 8)))

    def test_stochastic_member_rejected(self):
        with pytest.raises(ValueError):
            vanilla_ensemble_predict([StochasticSegNet(NetConfig(widths=(4, 4)))], np.zeros((1, 1, 8, 8)))


class TestPairedT:
    def test_hand_case(self):
        res = paired_t_test([1.0, 2.0, 3.0], [0.0, 0.0, 0.0])
        assert res.t == pytest.approx(2 * math.sqrt(3), abs=1e-12)
        oracle = t_two_sided_p(2 * math.sqrt(3), 2)
        assert res.p == pytest.approx(oracle, abs=1e-10)
        assert res.p == pytest.approx(0.0742, abs=5e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_quadrature_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=8), rng.normal(size=8)
        res = paired_t_test(a, b)
        assert res.p == pytest.approx(t_two_sided_p(res.t, 7), abs=1e-9)

    def test_identical_scores_degenerate(self):
        res = paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])
        assert res.degenerate and math.isnan(res.p) and math.isnan(res.t)

    def test_consistent_improvement_significant(self):
        rng = np.random.default_rng(0)
        d = 1 + 1e-3 * rng.standard_normal(4)
        t, p = paired_t_test(d, np.zeros(4))
        assert p < 0.01 and t > 0

    def test_length_checks(self):
        with pytest.raises(ValueError):
            paired_t_test([1.0], [0.0])
        with pytest.raises(ValueError):
            paired_t_test([1.0, 2.0], [0.0])
