"""Score fusion, kernel fusion, feature concatenation, weight search."""

import numpy as np
import pytest

from spdtraj.errors import NumericalError, ValidationError
from spdtraj.fusion import (
    FusionConfig,
    feature_concat,
    kernel_weighted_sum,
    late_product,
    late_weighted_sum,
    search_weights,
    simplex_grid,
    sym_to_vec,
    write_weight_trace_csv,
)
from spdtraj.spdcore import check_psd

from conftest import random_symmetric


def random_simplex_rows(rng, n, l):
    S = rng.uniform(0.05, 1.0, size=(n, l))
    return S / S.sum(axis=1, keepdims=True)


def informative_kernel(y, strong=1.0, weak=0.05, ridge=0.01):
    same = (y[:, None] == y[None, :]).astype(np.float64)
    K = weak + (strong - weak) * same
    return K + ridge * np.eye(y.size)


class TestFusionConfig:
    def test_weights_normalized(self):
        cfg = FusionConfig(strategy="late_weighted_sum",
                           channels=("a", "b"), weights=(2.0, 6.0))
        assert cfg.weights == (0.25, 0.75)
        assert abs(sum(cfg.weights) - 1.0) < 1e-9

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ValidationError):
            FusionConfig(strategy="mystery", channels=("a",), weights=(1.0,))

    def test_duplicate_channels_rejected(self):
        with pytest.raises(ValidationError):
            FusionConfig(strategy="late_product", channels=("a", "a"),
                         weights=(0.5, 0.5))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            FusionConfig(strategy="late_weighted_sum", channels=("a", "b"),
                         weights=(-0.1, 1.1))

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValidationError):
            FusionConfig(strategy="late_weighted_sum", channels=("a", "b"),
                         weights=(0.0, 0.0))

    def test_round_trip(self):
        cfg = FusionConfig.uniform("kernel_weighted_sum", ("global", "mouth"))
        back = FusionConfig.from_dict(cfg.to_dict())
        assert back.strategy == cfg.strategy
        assert back.channels == cfg.channels
        assert back.weights == cfg.weights


class TestLateProduct:
    def test_uniform_channel_is_neutral(self, rng):
        S = random_simplex_rows(rng, 5, 4)
        U = np.full((5, 4), 0.25)
        fused = late_product([S, U])
        assert np.allclose(fused, S, atol=1e-14)

    def test_identical_channels_sharpen(self):
        S = np.array([[0.8, 0.2]])
        fused = late_product([S, S])
        assert fused[0, 0] == pytest.approx(0.941176, abs=5e-7)
        assert fused[0, 1] == pytest.approx(0.058824, abs=5e-7)
        # exact values: 0.64/0.68 and 0.04/0.68
        assert np.allclose(fused[0], [16.0 / 17.0, 1.0 / 17.0], atol=1e-12)

    def test_zero_class_stays_zero(self, rng):
        A = np.array([[0.0, 0.3, 0.7]])
        B = random_simplex_rows(rng, 1, 3)
        assert late_product([A, B])[0, 0] == 0.0

    def test_all_zero_product_rejected(self):
        A = np.array([[1.0, 0.0]])
        B = np.array([[0.0, 1.0]])
        with pytest.raises(NumericalError):
            late_product([A, B])

    def test_stays_on_simplex(self, rng):
        chans = [random_simplex_rows(rng, 8, 5) for _ in range(3)]
        fused = late_product(chans)
        assert np.all(fused >= 0.0)
        assert np.abs(fused.sum(axis=1) - 1.0).max() < 1e-9

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            late_product([random_simplex_rows(rng, 3, 2),
                          random_simplex_rows(rng, 3, 3)])

    def test_negative_scores_rejected(self):
        with pytest.raises(ValidationError):
            late_product([np.array([[0.5, 0.5]]), np.array([[-0.1, 1.1]])])


class TestLateWeightedSum:
    def test_one_hot_selects_channel(self, rng):
        chans = [random_simplex_rows(rng, 6, 3) for _ in range(4)]
        for k in range(4):
            beta = tuple(1.0 if i == k else 0.0 for i in range(4))
            fused = late_weighted_sum(chans, beta)
            assert np.abs(fused - chans[k]).max() <= 1e-15

    def test_identical_channels_identity(self, rng):
        S = random_simplex_rows(rng, 5, 4)
        fused = late_weighted_sum([S, S, S], (0.2, 0.5, 0.3))
        assert np.allclose(fused, S, atol=1e-15)

    def test_uniform_weights_are_mean(self, rng):
        chans = [random_simplex_rows(rng, 7, 4) for _ in range(4)]
        fused = late_weighted_sum(chans, (0.25, 0.25, 0.25, 0.25))
        ref = sum(chans) / 4.0
        assert np.abs(fused - ref).max() < 1e-12

    def test_stays_on_simplex(self, rng):
        chans = [random_simplex_rows(rng, 5, 3) for _ in range(2)]
        fused = late_weighted_sum(chans, (0.7, 0.3))
        assert np.all(fused >= 0.0)
        assert np.abs(fused.sum(axis=1) - 1.0).max() < 1e-9

    def test_channel_permutation_invariance(self, rng):
        chans = [random_simplex_rows(rng, 5, 3) for _ in range(3)]
        beta = (0.5, 0.3, 0.2)
        perm = [2, 0, 1]
        a = late_weighted_sum(chans, beta)
        b = late_weighted_sum([chans[p] for p in perm], tuple(beta[p] for p in perm))
        assert np.abs(a - b).max() < 1e-12


class TestKernelWeightedSum:
    def _psd(self, rng, n):
        A = rng.standard_normal((n, n))
        return A @ A.T / n

    def test_one_hot_is_bit_exact(self, rng):
        kernels = [self._psd(rng, 6) for _ in range(3)]
        for k in range(3):
            beta = tuple(1.0 if i == k else 0.0 for i in range(3))
            fused = kernel_weighted_sum(kernels, beta)
            assert np.array_equal(fused.values, kernels[k])

    def test_identical_channels_identity(self, rng):
        K = self._psd(rng, 5)
        fused = kernel_weighted_sum([K, K, K], (0.1, 0.6, 0.3))
        assert np.allclose(fused.values, K, atol=1e-12)

    def test_conic_combination_stays_psd(self, rng):
        for _ in range(10):
            kernels = [self._psd(rng, 8) for _ in range(4)]
            w = rng.uniform(0, 1, 4)
            w /= w.sum()
            fused = kernel_weighted_sum(kernels, tuple(w))
            assert check_psd(fused.values, tol=1e-9).passed
            assert fused.kind == "fused"

    def test_negative_weight_rejected(self, rng):
        kernels = [self._psd(rng, 4), self._psd(rng, 4)]
        with pytest.raises(ValidationError):
            kernel_weighted_sum(kernels, (-0.2, 1.2))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            kernel_weighted_sum([self._psd(rng, 4), self._psd(rng, 5)], (0.5, 0.5))

    def test_non_psd_input_caught(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NumericalError):
            kernel_weighted_sum([bad], (1.0,))

    def test_channel_permutation_invariance(self, rng):
        kernels = [self._psd(rng, 5) for _ in range(3)]
        beta = (0.5, 0.25, 0.25)
        perm = [1, 2, 0]
        a = kernel_weighted_sum(kernels, beta).values
        b = kernel_weighted_sum([kernels[p] for p in perm],
                                tuple(beta[p] for p in perm)).values
        assert np.abs(a - b).max() < 1e-12


class TestFeatureConcat:
    def test_inner_products_match_frobenius(self, rng):
        logs = [random_symmetric(rng, 4) for _ in range(6)]
        X = feature_concat([logs])
        for i in range(6):
            for j in range(6):
                frob = float(np.sum(logs[i] * logs[j]))
                assert X[i] @ X[j] == pytest.approx(frob, rel=1e-10, abs=1e-10)

    def test_zero_logs_zero_vector(self):
        X = feature_concat([[np.zeros((3, 3))], [np.zeros((2, 2))]])
        assert np.array_equal(X, np.zeros((1, 6 + 3)))

    def test_two_channels_length(self, rng):
        m = 5
        logs = [random_symmetric(rng, m) for _ in range(3)]
        X = feature_concat([logs, logs])
        assert X.shape == (3, m * (m + 1))

    def test_distances_match_frobenius_distance(self, rng):
        # concatenation turns LERM geometry into plain Euclidean geometry
        a, b = random_symmetric(rng, 4), random_symmetric(rng, 4)
        X = feature_concat([[a, b]])
        assert np.linalg.norm(X[0] - X[1]) == pytest.approx(
            np.linalg.norm(a - b, "fro"), rel=1e-10)

    def test_sample_count_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            feature_concat([[random_symmetric(rng, 3)],
                            [random_symmetric(rng, 3), random_symmetric(rng, 3)]])

    def test_inconsistent_sizes_within_channel_rejected(self, rng):
        with pytest.raises(ValidationError):
            feature_concat([[random_symmetric(rng, 3), random_symmetric(rng, 4)]])

    def test_sym_to_vec_norm_preserved(self, rng):
        S = random_symmetric(rng, 6)
        v = sym_to_vec(S)
        assert np.linalg.norm(v) == pytest.approx(np.linalg.norm(S, "fro"), rel=1e-12)


class TestSimplexGrid:
    def test_five_channels_count(self):
        grid = simplex_grid(5, step=0.1)
        assert len(grid) == 1001  # compositions of 10 into 5 parts

    def test_lexicographic_order(self):
        grid = simplex_grid(3, step=0.5)
        assert grid == sorted(grid)
        assert grid[0] == (0.0, 0.0, 1.0)
        assert grid[-1] == (1.0, 0.0, 0.0)

    def test_rows_sum_to_one(self):
        for beta in simplex_grid(4, step=0.25):
            assert sum(beta) == pytest.approx(1.0, abs=1e-12)
            assert all(b >= 0 for b in beta)

    def test_single_channel(self):
        assert simplex_grid(1, step=0.1) == [(1.0,)]

    def test_bad_step_rejected(self):
        with pytest.raises(ValidationError):
            simplex_grid(2, step=0.3)


class TestSearchWeights:
    def _labels(self, n=12):
        return np.array(["a", "b"] * (n // 2))

    def _misleading_kernel(self, y):
        # block kernel built from labels with four memberships flipped;
        # those samples get confidently misclassified unless the clean
        # channel carries enough weight to outvote this one
        y_corr = y.copy()
        for i in (0, 3, 7, 10):
            y_corr[i] = "a" if y_corr[i] == "b" else "b"
        return informative_kernel(y_corr, strong=1.0, weak=0.0, ridge=0.05)

    def test_dominant_channel_wins(self, rng):
        y = self._labels()
        good = informative_kernel(y, strong=1.0, weak=0.7, ridge=0.05)
        bad = self._misleading_kernel(y)
        cfg = search_weights([good, bad], y, "kernel_weighted_sum",
                             folds=3, channel_names=("good", "bad"))
        assert cfg.channels == ("good", "bad")
        assert np.argmax(cfg.weights) == 0

    def test_dominant_channel_wins_late(self, rng):
        y = self._labels()
        good = informative_kernel(y, strong=1.0, weak=0.7, ridge=0.05)
        bad = self._misleading_kernel(y)
        cfg = search_weights([good, bad], y, "late_weighted_sum", folds=3)
        assert np.argmax(cfg.weights) == 0

    def test_identical_channels_tie_break(self, rng):
        y = self._labels()
        K = informative_kernel(y)
        cfg = search_weights([K, K, K], y, "kernel_weighted_sum", folds=3)
        # every candidate ties; the lexicographically smallest grid point wins
        assert cfg.weights == (0.0, 0.0, 1.0)

    def test_winner_is_first_best_trace_entry(self, rng):
        y = self._labels()
        good = informative_kernel(y, strong=1.0, weak=0.7, ridge=0.05)
        bad = self._misleading_kernel(y)
        cfg, trace = search_weights([good, bad], y, "kernel_weighted_sum",
                                    folds=3, return_trace=True)
        means = [acc for _, _, acc in trace]
        first_best = trace[int(np.argmax(means))][0]
        assert cfg.weights == first_best

    def test_trace_csv(self, rng, tmp_path):
        y = self._labels()
        good = informative_kernel(y)
        noise = np.eye(y.size)
        cfg, trace = search_weights([good, noise], y, "late_weighted_sum",
                                    folds=3, return_trace=True)
        assert len(trace) == len(simplex_grid(2, 0.1))
        path = tmp_path / "trace.csv"
        write_weight_trace_csv(trace, path)
        lines = path.read_text().splitlines()
        assert len(lines) == len(trace)
        first = [float(v) for v in lines[0].split(",")]
        assert len(first) == 2 + 3 + 1  # beta, per-fold accuracies, mean

    def test_unweighted_strategy_rejected(self, rng):
        y = self._labels()
        with pytest.raises(ValidationError):
            search_weights([np.eye(y.size)], y, "late_product", folds=3)

    def test_single_fold_rejected(self, rng):
        y = self._labels()
        with pytest.raises(ValidationError):
            search_weights([np.eye(y.size)], y, "kernel_weighted_sum", folds=1)

    def test_custom_fold_assignment(self, rng):
        y = self._labels()
        K = informative_kernel(y)
        assign = np.repeat([0, 1, 2], 4)
        cfg = search_weights([K], y, "kernel_weighted_sum", folds=3,
                             fold_assignment=assign)
        assert cfg.weights == (1.0,)

    def test_empty_fold_rejected(self, rng):
        y = self._labels()
        K = informative_kernel(y)
        assign = np.zeros(y.size, dtype=int)  # only fold 0 occupied
        with pytest.raises(ValidationError):
            search_weights([K], y, "kernel_weighted_sum", folds=2,
                           fold_assignment=assign)
