"""Logit route choice and the statistical-equilibrium fixed point."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdode.behavior import (
    logit_choice,
    solve_statistical_equilibrium,
    uniform_choice,
)
from pdode.demand import PDOD, substream
from pdode.net import TimeGrid, enumerate_paths


class TestLogitChoice:
    def test_equal_costs_split_evenly(self, symmetric_diamond_net):
        paths = enumerate_paths(symmetric_diamond_net, 5)
        choice = logit_choice(np.array([120.0, 120.0]), paths, dispersion=0.1)
        np.testing.assert_allclose(choice.probs, [[0.5, 0.5]])

    def test_hand_computed_share(self, diamond_net):
        paths = enumerate_paths(diamond_net, 5)
        # theta=0.1, costs (10, 20): p1 = 1 / (1 + exp(-1)).
        choice = logit_choice(np.array([10.0, 20.0]), paths, dispersion=0.1)
        expected = 1.0 / (1.0 + math.exp(-1.0))
        assert choice.probs[0, 0] == pytest.approx(expected, rel=1e-12)
        assert choice.probs[0, 1] == pytest.approx(1.0 - expected, rel=1e-12)

    def test_extreme_cost_underflows_safely(self):
        from conftest import make_network
        from pdode.net import Link

        links = [
            Link(id=i, from_node=1, to_node=2, length=0.5, free_flow_speed=30.0,
                 capacity=1000.0)
            for i in (1, 2, 3)
        ]
        net = make_network(links, [(1, 2)])
        paths = enumerate_paths(net, 5)
        choice = logit_choice(np.array([10.0, 10.0, 1e6]), paths, dispersion=0.1)
        assert choice.probs[0, 2] == pytest.approx(0.0, abs=1e-300)
        np.testing.assert_allclose(choice.probs[0, :2], 0.5, rtol=1e-12)
        assert np.isfinite(choice.probs).all()

    def test_shift_invariance(self, diamond_net):
        paths = enumerate_paths(diamond_net, 5)
        base = logit_choice(np.array([100.0, 130.0]), paths, dispersion=0.05)
        shifted = logit_choice(np.array([100.0 + 55.5, 130.0 + 55.5]), paths, 0.05)
        np.testing.assert_allclose(shifted.probs, base.probs, atol=1e-12)

    def test_share_strictly_decreases_with_cost(self, diamond_net):
        paths = enumerate_paths(diamond_net, 5)
        lo = logit_choice(np.array([100.0, 130.0]), paths, dispersion=0.05)
        hi = logit_choice(np.array([110.0, 130.0]), paths, dispersion=0.05)
        assert hi.probs[0, 0] < lo.probs[0, 0]

    def test_rejects_bad_inputs(self, diamond_net):
        paths = enumerate_paths(diamond_net, 5)
        with pytest.raises(ValueError):
            logit_choice(np.array([np.inf, 1.0]), paths, dispersion=0.1)
        with pytest.raises(ValueError):
            logit_choice(np.array([1.0, 1.0]), paths, dispersion=0.0)
        with pytest.raises(ValueError):
            logit_choice(np.array([1.0, 1.0, 1.0]), paths, dispersion=0.1)

    @given(
        costs=st.lists(st.floats(min_value=0.0, max_value=1e4), min_size=2, max_size=2),
        theta=st.floats(min_value=1e-3, max_value=1.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_column_stochastic_property(self, costs, theta):
        from conftest import make_network
        from pdode.net import Link

        links = [
            Link(id=i, from_node=1, to_node=2, length=0.5, free_flow_speed=30.0,
                 capacity=1000.0)
            for i in (1, 2)
        ]
        net = make_network(links, [(1, 2)])
        paths = enumerate_paths(net, 5)
        tiled = np.tile(np.asarray(costs), 3)
        choice = logit_choice(tiled, paths, dispersion=theta)
        np.testing.assert_allclose(choice.column_sums(), 1.0, atol=1e-12)


class TestSparseForm:
    def test_matrix_layout(self, diamond_net):
        paths = enumerate_paths(diamond_net, 5)
        choice = uniform_choice(paths, num_intervals=2, dispersion=0.1)
        mat = choice.to_sparse()
        assert mat.shape == (4, 2)
        demand = np.array([10.0, 6.0])
        flows = choice.apply(demand)
        np.testing.assert_allclose(flows, [5.0, 5.0, 3.0, 3.0])


class TestEquilibrium:
    def test_single_path_fixed_immediately(self, single_link_net, grid_100s):
        paths = enumerate_paths(single_link_net, 5)
        pdod = PDOD(q=np.full(3, 10.0), sigma=np.full(3, 1.0))
        result = solve_statistical_equilibrium(
            single_link_net, paths, grid_100s, pdod, num_samples=2, max_iters=5,
            tol=1e-4, dispersion=0.1, seed=1,
        )
        assert result.converged
        np.testing.assert_allclose(result.choice.probs, 1.0)
        assert len(result.loadings) == 2

    def test_symmetric_routes_split_evenly(self, symmetric_diamond_net, grid_100s):
        paths = enumerate_paths(symmetric_diamond_net, 5)
        pdod = PDOD(q=np.full(3, 30.0), sigma=np.full(3, 2.0))
        result = solve_statistical_equilibrium(
            symmetric_diamond_net, paths, grid_100s, pdod, num_samples=4,
            max_iters=60, tol=1e-4, dispersion=0.05, seed=3,
        )
        np.testing.assert_allclose(result.choice.probs, 0.5, atol=1e-4)

    def test_column_sums_on_grid_network(self):
        from pdode.networks import build_small13

        net = build_small13()
        paths = enumerate_paths(net, 6)
        grid = TimeGrid(num_intervals=4, interval_length=100.0)
        nk = grid.num_intervals * net.num_od_pairs
        rng = substream(11, 0)
        pdod = PDOD(q=rng.uniform(10, 30, nk), sigma=rng.uniform(1, 3, nk))
        result = solve_statistical_equilibrium(
            net, paths, grid, pdod, num_samples=3, max_iters=12, tol=1e-3,
            dispersion=0.01, seed=5,
        )
        np.testing.assert_allclose(result.choice.column_sums(), 1.0, atol=1e-9)

    def test_nonconvergence_warns(self, diamond_net, grid_100s):
        # Asymmetric routes: the first Logit response differs from the
        # uniform start, so one iteration cannot satisfy a tiny tolerance.
        paths = enumerate_paths(diamond_net, 5)
        pdod = PDOD(q=np.full(3, 60.0), sigma=np.full(3, 6.0))
        with pytest.warns(UserWarning, match="not converged"):
            result = solve_statistical_equilibrium(
                diamond_net, paths, grid_100s, pdod, num_samples=2,
                max_iters=1, tol=1e-12, dispersion=0.05, seed=4,
            )
        assert not result.converged

    def test_deterministic_given_seed(self, diamond_net, grid_100s):
        paths = enumerate_paths(diamond_net, 5)
        pdod = PDOD(q=np.full(3, 25.0), sigma=np.full(3, 2.0))
        kwargs = dict(num_samples=3, max_iters=30, tol=1e-4, dispersion=0.05, seed=9)
        a = solve_statistical_equilibrium(diamond_net, paths, grid_100s, pdod, **kwargs)
        b = solve_statistical_equilibrium(diamond_net, paths, grid_100s, pdod, **kwargs)
        np.testing.assert_array_equal(a.choice.probs, b.choice.probs)
