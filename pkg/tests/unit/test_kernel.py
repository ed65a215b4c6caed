import itertools
import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from kernel import (
    KernelError,
    gram_blocks,
    median_distance,
    mmd,
    mmd_squared_weighted,
    rbf,
    select_bandwidth,
    select_bandwidth_details,
)


class TestRbf:
    @pytest.mark.parametrize("x", [[0.0], [1.5, -2.0], [3.0, 4.0, 5.0]])
    def test_identical_points(self, x):
        assert rbf(x, x, 0.7) == 1.0

    def test_closed_form(self):
        assert rbf([0.0, 0.0], [3.0, 4.0], 5.0) == pytest.approx(math.exp(-0.5))

    def test_far_points_underflow_to_zero(self):
        value = rbf([0.0], [100.0], 1.0)

        assert 0.0 <= value < 1e-300
        assert not math.isnan(value)

    def test_dimension_mismatch(self):
        with pytest.raises(KernelError, match="dimension mismatch"):
            rbf([0.0], [0.0, 1.0], 1.0)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_non_positive_sigma(self, sigma):
        with pytest.raises(KernelError):
            rbf([0.0], [1.0], sigma)


class TestGramBlocks:
    def test_single_identical_point(self):
        ctx = gram_blocks(np.array([[2.0]]), np.array([[2.0]]), 1.0)

        for block in (ctx.k_ss, ctx.k_st, ctx.k_tt):
            np.testing.assert_array_equal(block, [[1.0]])

    def test_same_sample_gives_equal_blocks(self):
        x = np.random.default_rng(0).standard_normal((6, 2))

        ctx = gram_blocks(x, x, 0.8)

        np.testing.assert_allclose(ctx.k_ss, ctx.k_tt)
        np.testing.assert_allclose(ctx.k_ss, ctx.k_st)

    def test_entrywise_closed_form(self):
        ctx = gram_blocks(np.array([0.0, 1.0]), np.array([0.0]), 1.0)

        e = math.exp(-0.5)
        np.testing.assert_allclose(ctx.k_ss, [[1.0, e], [e, 1.0]])
        np.testing.assert_allclose(ctx.k_st, [[1.0], [e]])
        assert ctx.n_source == 2
        assert ctx.n_target == 1

    def test_blocks_are_symmetric_and_read_only(self):
        rng = np.random.default_rng(1)
        ctx = gram_blocks(rng.standard_normal((5, 3)), rng.standard_normal((4, 3)), 1.3)

        np.testing.assert_array_equal(ctx.k_ss, ctx.k_ss.T)
        np.testing.assert_array_equal(np.diag(ctx.k_tt), np.ones(4))
        assert ctx.k_st.shape == (5, 4)
        for block in (ctx.k_ss, ctx.k_st, ctx.k_tt):
            assert not block.flags.writeable

    def test_dimension_mismatch(self):
        with pytest.raises(KernelError, match="dimension mismatch"):
            gram_blocks(np.zeros((2, 2)), np.zeros((2, 3)), 1.0)


class TestMedianDistance:
    def test_small_sample(self):
        assert median_distance(np.array([[0.0]]), np.array([[1.0], [2.0], [3.0]])) == 2.0

    def test_repeated_point_falls_back(self):
        point = np.array([[1.0, 1.0]] * 3)

        assert median_distance(point, point) == 1.0

    def test_grid_matches_enumeration(self):
        source = np.array(list(itertools.product([0.0, 1.0], [0.0, 2.0])))
        target = np.array(list(itertools.product([0.5, 3.0], [1.0, -1.0])))
        expected = np.median(
            [np.linalg.norm(s - t) for s, t in itertools.product(source, target)]
        )

        assert median_distance(source, target) == pytest.approx(expected)

    def test_subsampled_above_cap_is_seeded(self):
        rng = np.random.default_rng(2)
        source, target = rng.standard_normal((30, 2)), rng.standard_normal((30, 2))

        first = median_distance(source, target, cap=100, seed=3)
        second = median_distance(source, target, cap=100, seed=3)

        assert first == second
        assert first > 0

    def test_empty_sample(self):
        with pytest.raises(KernelError):
            median_distance(np.zeros((0, 1)), np.zeros((2, 1)))


def _reference_selection(source, target, n_permutations, seed, factors):
    """Plain-loop reimplementation of the standardized-MMD grid search."""
    n, m = len(source), len(target)
    pooled = np.vstack([source, target])
    median = float(np.median(cdist(source, target)))
    rng = np.random.default_rng(seed)
    permutations = [rng.permutation(n + m) for _ in range(n_permutations)]
    signed = np.concatenate([np.full(n, 1.0 / n), np.full(m, -1.0 / m)])
    best, best_z = None, -np.inf
    for sigma in sorted(f * median for f in factors):
        gram = np.exp(-cdist(pooled, pooled, "sqeuclidean") / (2 * sigma**2))
        observed = signed @ gram @ signed
        null = [signed[perm] @ gram @ signed[perm] for perm in permutations]
        z = (observed - np.mean(null)) / max(np.std(null), 1e-12)
        if observed <= 1e-12:
            z = -np.inf
        if z >= best_z:
            best, best_z = sigma, z
    return best


class TestSelectBandwidth:
    def test_identical_samples_pick_largest_candidate(self):
        x = np.random.default_rng(0).standard_normal((10, 2))

        selection = select_bandwidth_details(x, x, n_permutations=20)

        assert selection.sigma == pytest.approx(2.0 * selection.median)
        assert all(z == -np.inf for z in selection.z_scores)

    def test_separated_clusters_match_reference_loop(self):
        rng = np.random.default_rng(4)
        source = rng.normal(-5.0, 1.0, size=(50, 1))
        target = rng.normal(5.0, 1.0, size=(50, 1))
        factors = (0.01, 0.1, 0.5, 1.0, 2.0)

        sigma = select_bandwidth(source, target, n_permutations=30, seed=6)

        assert sigma == pytest.approx(_reference_selection(source, target, 30, 6, factors))

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        source, target = rng.standard_normal((20, 2)), rng.standard_normal((25, 2)) + 0.5

        first = select_bandwidth_details(source, target, n_permutations=25, seed=1)
        second = select_bandwidth_details(source, target, n_permutations=25, seed=1)

        assert first == second
        assert first.candidates == tuple(sorted(first.candidates))
        assert first.sigma in first.candidates

    @pytest.mark.parametrize("n_source, n_target", [(1, 5), (5, 1)])
    def test_needs_two_points(self, n_source, n_target):
        with pytest.raises(KernelError):
            select_bandwidth(np.zeros((n_source, 1)), np.ones((n_target, 1)))


class TestWeightedMmd:
    def test_identical_embeddings(self):
        ctx = gram_blocks(np.array([[0.3]]), np.array([[0.3]]), 1.0)

        assert mmd_squared_weighted(ctx, np.ones(1), np.ones(1)) == 0.0

    def test_one_point_closed_form(self):
        ctx = gram_blocks(np.array([[0.0]]), np.array([[1.0]]), 1.0)

        value = mmd_squared_weighted(ctx, np.ones(1), np.ones(1))

        assert value == pytest.approx(2.0 * (1.0 - math.exp(-0.5)))
        assert mmd(ctx, np.ones(1), np.ones(1)) == pytest.approx(math.sqrt(value))

    def test_reweighting_recovers_target(self):
        ctx = gram_blocks(np.array([[0.0], [1.0]]), np.array([[0.0]]), 1.0)

        assert mmd_squared_weighted(ctx, np.array([2.0, 0.0]), np.ones(1)) == pytest.approx(
            0.0, abs=1e-15
        )

    def test_length_mismatch(self):
        ctx = gram_blocks(np.zeros((2, 1)), np.zeros((3, 1)), 1.0)

        with pytest.raises(KernelError, match="do not match"):
            mmd_squared_weighted(ctx, np.ones(3), np.ones(3))


def _random_pair(seed, n=20, m=15, dim=3):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, dim)), rng.standard_normal((m, dim)) + 0.5, rng


class TestMmdInvariants:
    @pytest.mark.parametrize("seed", range(5))
    def test_joint_permutation_invariance(self, seed):
        source, target, rng = _random_pair(seed)
        w, a = rng.uniform(0.0, 3.0, len(source)), rng.uniform(0.0, 1.0, len(target))
        perm_s, perm_t = rng.permutation(len(source)), rng.permutation(len(target))

        value = mmd_squared_weighted(gram_blocks(source, target, 1.3), w, a)
        permuted = mmd_squared_weighted(
            gram_blocks(source[perm_s], target[perm_t], 1.3), w[perm_s], a[perm_t]
        )

        assert permuted == pytest.approx(value, rel=1e-10, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_convex_in_source_weights(self, seed):
        source, target, rng = _random_pair(seed)
        ctx = gram_blocks(source, target, 0.8)
        a = np.ones(len(target))
        first, second = rng.uniform(0.0, 5.0, (2, len(source)))

        for share in (0.1, 0.5, 0.9):
            mixed = mmd_squared_weighted(ctx, share * first + (1 - share) * second, a)
            chord = share * mmd_squared_weighted(ctx, first, a) + (
                1 - share
            ) * mmd_squared_weighted(ctx, second, a)
            assert mixed <= chord + 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_source_gram_is_psd(self, seed):
        source, target, _ = _random_pair(seed)

        ctx = gram_blocks(source, target, 0.5 + seed)

        assert np.min(np.linalg.eigvalsh(ctx.k_ss)) >= -1e-10
        assert np.min(np.linalg.eigvalsh(ctx.k_tt)) >= -1e-10
