"""Statistical distance formulas, axioms, and gradient fidelity."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdode.demand import substream
from pdode.distance import (
    STD_FLOOR,
    DistanceKind,
    GaussianSummary,
    chain_to_samples,
    distance,
    distance_gradient,
    fit_summary,
)
from helpers import central_difference, relative_error

ALL_KINDS = list(DistanceKind)


def summary(mean, std):
    return GaussianSummary(mean=np.atleast_1d(mean), std=np.atleast_1d(std), sample_count=0)


def random_summary(rng, dim):
    return summary(rng.uniform(-5.0, 5.0, dim), rng.uniform(0.2, 3.0, dim))


class TestFitSummary:
    def test_constant_batch_floors_std(self):
        s = fit_summary([[2.0], [2.0], [2.0]])
        np.testing.assert_allclose(s.mean, [2.0])
        np.testing.assert_allclose(s.std, [STD_FLOOR])
        assert s.floored.all()

    def test_two_point_batch_ddof1(self):
        s = fit_summary([[1.0], [3.0]], ddof=1)
        np.testing.assert_allclose(s.mean, [2.0])
        np.testing.assert_allclose(s.std, [math.sqrt(2.0)])

    def test_two_point_batch_ddof0(self):
        s = fit_summary([[0.0, 10.0], [4.0, 10.0]], ddof=0)
        np.testing.assert_allclose(s.mean, [2.0, 10.0])
        np.testing.assert_allclose(s.std, [2.0, STD_FLOOR])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            fit_summary(np.empty((0, 3)))

    def test_single_vector_needs_ddof0(self):
        with pytest.raises(ValueError):
            fit_summary([[1.0, 2.0]], ddof=1)
        s = fit_summary([[1.0, 2.0]], ddof=0)
        np.testing.assert_allclose(s.mean, [1.0, 2.0])


class TestDistanceValues:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_identical_summaries_give_zero(self, kind):
        s = summary([1.0, -2.0, 0.5], [0.7, 1.3, 2.0])
        assert distance(kind, s, s) == pytest.approx(0.0, abs=1e-14)

    def test_w2_example(self):
        # (3-0)^2 + (2-1)^2 = 10 exactly.
        assert distance(DistanceKind.W2, summary(0.0, 1.0), summary(3.0, 2.0)) == 10.0

    def test_forward_kl_example(self):
        # Unit variances, unit mean gap: 0.5 * (0 + 1 + 1 - 1) = 0.5.
        val = distance(DistanceKind.FORWARD_KL, summary(0.0, 1.0), summary(1.0, 1.0))
        assert val == pytest.approx(0.5, rel=1e-12)

    def test_bhattacharyya_example(self):
        # Equal means, stds 1 and 2: 0.5 * ln(2.5 / 2).
        val = distance(DistanceKind.BHATTACHARYYA, summary(0.0, 1.0), summary(0.0, 2.0))
        assert val == pytest.approx(0.5 * math.log(1.25), rel=1e-12)
        assert val == pytest.approx(0.1115717756571049, rel=1e-10)

    def test_l1_compares_covariance_diagonals(self):
        val = distance(DistanceKind.L1, summary(1.0, 1.0), summary(3.0, 2.0))
        assert val == pytest.approx(2.0 + 3.0)  # |dmean| + |1 - 4|

    def test_l2_squares_both_blocks(self):
        val = distance(DistanceKind.L2, summary(1.0, 1.0), summary(3.0, 2.0))
        assert val == pytest.approx(4.0 + 9.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            distance(DistanceKind.W2, summary([0.0, 1.0], [1.0, 1.0]), summary(0.0, 1.0))

    def test_kl_rejects_nonpositive_std(self):
        bad = GaussianSummary(mean=np.array([0.0]), std=np.array([0.0]), sample_count=0)
        with pytest.raises(ValueError):
            distance(DistanceKind.FORWARD_KL, bad, summary(0.0, 1.0))


class TestDistanceAxioms:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_nonnegative_and_identity(self, kind):
        rng = substream(99, 0)
        for trial in range(1000):
            dim = int(rng.integers(1, 6))
            a = random_summary(rng, dim)
            b = random_summary(rng, dim)
            d_ab = distance(kind, a, b)
            assert d_ab >= 0.0
            assert d_ab > 1e-10  # random pairs differ
            assert distance(kind, a, a) <= 1e-10

    @pytest.mark.parametrize(
        "kind",
        [DistanceKind.L1, DistanceKind.L2, DistanceKind.W2, DistanceKind.BHATTACHARYYA],
    )
    def test_symmetry(self, kind):
        rng = substream(99, 1)
        for _ in range(100):
            a = random_summary(rng, 4)
            b = random_summary(rng, 4)
            assert distance(kind, a, b) == pytest.approx(distance(kind, b, a), rel=1e-12)

    def test_forward_kl_is_asymmetric(self):
        a = summary(0.0, 1.0)
        b = summary(1.0, 2.0)
        assert distance(DistanceKind.FORWARD_KL, a, b) != pytest.approx(
            distance(DistanceKind.FORWARD_KL, b, a)
        )

    def test_w2_scales_quadratically(self):
        rng = substream(99, 2)
        a = random_summary(rng, 5)
        b = random_summary(rng, 5)
        base = distance(DistanceKind.W2, a, b)
        for c in (0.5, 2.0, 7.0):
            ca = summary(c * a.mean, c * a.std)
            cb = summary(c * b.mean, c * b.std)
            assert distance(DistanceKind.W2, ca, cb) == pytest.approx(c**2 * base, rel=1e-12)


class TestDistanceGradient:
    def test_w2_zero_at_minimum(self):
        s = summary([1.0, 2.0], [0.5, 0.7])
        g_mean, g_std = distance_gradient(DistanceKind.W2, s, s)
        np.testing.assert_allclose(g_mean, 0.0)
        np.testing.assert_allclose(g_std, 0.0)

    def test_w2_example_gradient(self):
        g_mean, g_std = distance_gradient(
            DistanceKind.W2, summary(0.0, 1.0), summary(3.0, 2.0)
        )
        np.testing.assert_allclose(g_mean, [6.0])
        np.testing.assert_allclose(g_std, [2.0])

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("dim", [1, 3, 5, 12, 20])
    def test_matches_finite_differences(self, kind, dim):
        rng = substream(7, dim)
        obs = random_summary(rng, dim)
        sim = random_summary(rng, dim)
        g_mean, g_std = distance_gradient(kind, obs, sim)

        def loss_mean(m):
            return distance(kind, obs, summary(m, sim.std))

        def loss_std(s):
            return distance(kind, obs, summary(sim.mean, s))

        assert relative_error(g_mean, central_difference(loss_mean, sim.mean)) < 1e-6
        assert relative_error(g_std, central_difference(loss_std, sim.std)) < 1e-6


class TestChainToSamples:
    def test_identical_samples_share_gradient(self):
        obs = summary([3.0, 1.0], [1.0, 1.0])
        batch = np.array([[2.0, 0.5]] * 4)
        grads = chain_to_samples(DistanceKind.W2, obs, batch)
        assert grads.shape == (4, 2)
        for row in grads[1:]:
            np.testing.assert_allclose(row, grads[0])

    def test_perfect_fit_gives_zero(self):
        # Batch {(1),(3)} fits mean 2, std sqrt(2); identical observed
        # summary puts the distance at its minimum.
        obs = summary(2.0, math.sqrt(2.0))
        grads = chain_to_samples(DistanceKind.W2, obs, np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(grads, 0.0, atol=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            chain_to_samples(DistanceKind.W2, summary(0.0, 1.0), np.array([[1.0]]))

    @pytest.mark.parametrize("kind", ALL_KINDS)
    @pytest.mark.parametrize("ddof", [0, 1])
    def test_matches_finite_differences(self, kind, ddof):
        rng = substream(13, int(kind is DistanceKind.L1))
        obs = random_summary(rng, 4)
        batch = rng.uniform(1.0, 6.0, size=(5, 4))
        grads = chain_to_samples(kind, obs, batch, ddof=ddof)

        for l in range(batch.shape[0]):
            def loss(row, l=l):
                perturbed = batch.copy()
                perturbed[l] = row
                sim = fit_summary(perturbed, ddof=ddof)
                return distance(kind, obs, sim)

            fd = central_difference(loss, batch[l])
            assert relative_error(grads[l], fd) < 1e-5


@given(st.sampled_from(ALL_KINDS), st.integers(min_value=0, max_value=500))
@settings(max_examples=60, deadline=None)
def test_distance_nonnegative_property(kind, seed):
    rng = substream(seed, 42)
    dim = int(rng.integers(1, 8))
    a = random_summary(rng, dim)
    b = random_summary(rng, dim)
    assert distance(kind, a, b) >= 0.0
