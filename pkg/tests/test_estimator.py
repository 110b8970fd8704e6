"""Forward/backward passes, optimizer updates, and the estimation loop."""

import numpy as np
import pytest

from pdode.behavior import logit_choice, uniform_choice
from pdode.demand import PDOD, substream
from pdode.distance import DistanceKind, distance, fit_summary
from pdode.estimator import (
    EstimationConfig,
    EstimationError,
    EstimationState,
    backward_pass,
    estimate,
    forward_pass,
    initial_pdod,
    load_state,
    optimizer_step,
    save_state,
)
from pdode.evaluate import simulate_observations
from pdode.net import TimeGrid, enumerate_paths, path_free_flow_times
from conftest import toy_gradient_instance
from helpers import central_difference, relative_error


def toy_setup(seed=0, q_scale=18.0, sigma_scale=1.5):
    """The 2-OD / 4-path / 6-link instance with a congested middle link."""
    net, grid = toy_gradient_instance()
    paths = enumerate_paths(net, max_paths_per_od=2)
    assert paths.num_paths == 4 and net.num_links == 6
    nk = grid.num_intervals * net.num_od_pairs
    rng = substream(seed, 50)
    pdod = PDOD(
        q=rng.uniform(0.8 * q_scale, 1.2 * q_scale, nk),
        sigma=rng.uniform(0.8 * sigma_scale, 1.2 * sigma_scale, nk),
    )
    costs = np.tile(path_free_flow_times(net, paths), grid.num_intervals)
    choice = logit_choice(costs, paths, dispersion=0.01)
    observed_idx = np.arange(grid.num_intervals * net.num_links)
    obs_batch = rng.uniform(5.0, 30.0, size=(4, observed_idx.size))
    return net, paths, grid, pdod, choice, obs_batch, observed_idx


def replay_loss(tape, q, sigma, obs_summary, cfg):
    """Recompose the forward loss from the frozen tape pieces.

    Independent of backward_pass: plain matrix algebra over the recorded
    noise draws, route shares, and assignment ratios.
    """
    p = tape.choice.to_sparse()
    sims = []
    for l in range(tape.nus.shape[0]):
        demand = np.maximum(q + sigma * tape.nus[l], 0.0)
        flows = p @ demand
        link_flow = tape.dars[l] @ flows
        sims.append(np.asarray(link_flow)[tape.observed_idx])
    sim_summary = fit_summary(np.asarray(sims), ddof=cfg.ddof)
    return distance(cfg.distance_kind, obs_summary, sim_summary)


class TestForwardPass:
    def test_deterministic_given_seed(self):
        net, paths, grid, pdod, choice, obs, idx = toy_setup()
        cfg = EstimationConfig(num_samples=4, batch_size=4, seed=11)
        loss1, _ = forward_pass(net, paths, grid, pdod, choice, obs, idx, cfg, (1, 0))
        loss2, _ = forward_pass(net, paths, grid, pdod, choice, obs, idx, cfg, (1, 0))
        assert loss1 == loss2
        loss3, _ = forward_pass(net, paths, grid, pdod, choice, obs, idx, cfg, (1, 1))
        assert loss1 != loss3

    def test_positive_loss_when_means_gap(self):
        net, paths, grid, pdod, choice, obs, idx = toy_setup()
        cfg = EstimationConfig(num_samples=4, batch_size=4, seed=11)
        loss, tape = forward_pass(net, paths, grid, pdod, choice, obs, idx, cfg, (0,))
        assert loss > 0.0
        assert tape.sim_flows.shape == (4, idx.size)

    def test_rejects_single_day_batch(self):
        net, paths, grid, pdod, choice, obs, idx = toy_setup()
        cfg = EstimationConfig(num_samples=4, batch_size=4, seed=11)
        with pytest.raises(ValueError):
            forward_pass(net, paths, grid, pdod, choice, obs[:1], idx, cfg, (0,))


class TestBackwardPass:
    def test_zero_loss_gives_zero_gradients(self):
        net, paths, grid, pdod, choice, obs, idx = toy_setup()
        cfg = EstimationConfig(num_samples=4, batch_size=4, seed=11, ddof=1)
        _, tape = forward_pass(net, paths, grid, pdod, choice, obs, idx, cfg, (0,))
        # Feed the simulated flows back as the observed batch: the two
        # summaries coincide, the distance sits at its minimum.
        obs_summary = fit_summary(tape.sim_flows, ddof=1)
        assert distance(cfg.distance_kind, obs_summary, obs_summary) == 0.0
        g_q, g_sigma = backward_pass(tape, obs_summary, cfg)
        np.testing.assert_allclose(g_q, 0.0, atol=1e-12)
        np.testing.assert_allclose(g_sigma, 0.0, atol=1e-12)

    @pytest.mark.parametrize("kind", list(DistanceKind))
    def test_matches_finite_differences_frozen_tape(self, kind):
        net, paths, grid, pdod, choice, obs, idx = toy_setup()
        cfg = EstimationConfig(
            distance_kind=kind, num_samples=5, batch_size=4, seed=23, ddof=1
        )
        _, tape = forward_pass(net, paths, grid, pdod, choice, obs, idx, cfg, (0,))
        assert tape.active.all(), "clamping would break the finite-difference check"
        obs_summary = tape.obs_summary
        g_q, g_sigma = backward_pass(tape, obs_summary, cfg)

        fd_q = central_difference(
            lambda q: replay_loss(tape, q, pdod.sigma, obs_summary, cfg),
            pdod.q, step=1e-4,
        )
        fd_sigma = central_difference(
            lambda s: replay_loss(tape, pdod.q, s, obs_summary, cfg),
            pdod.sigma, step=1e-4,
        )
        assert relative_error(g_q, fd_q) < 1e-4
        assert relative_error(g_sigma, fd_sigma) < 1e-4


class TestOptimizerStep:
    def state(self, q=(1.0,), sigma=(1.0,)):
        return EstimationState(
            pdod=PDOD(q=np.asarray(q, float), sigma=np.asarray(sigma, float)),
            num_od_pairs=1,
        )

    def test_adagrad_first_step(self):
        state = self.state(q=(5.0,))
        cfg = EstimationConfig(learning_rate=0.1, num_samples=2, batch_size=2)
        optimizer_step(state, (np.array([1.0]), np.array([0.0])), cfg)
        assert state.pdod.q[0] == pytest.approx(5.0 - 0.1, rel=1e-5)

    def test_zero_gradient_keeps_state(self):
        state = self.state(q=(5.0,), sigma=(2.0,))
        cfg = EstimationConfig(learning_rate=0.1, num_samples=2, batch_size=2)
        optimizer_step(state, (np.zeros(1), np.zeros(1)), cfg)
        assert state.pdod.q[0] == 5.0
        assert state.pdod.sigma[0] == 2.0

    def test_projection_to_nonnegative(self):
        state = self.state(q=(0.05,))
        cfg = EstimationConfig(learning_rate=0.2, num_samples=2, batch_size=2)
        optimizer_step(state, (np.array([1.0]), np.array([0.0])), cfg)
        assert state.pdod.q[0] == 0.0

    def test_sigma_floored(self):
        state = self.state(sigma=(0.01,))
        cfg = EstimationConfig(learning_rate=1.0, num_samples=2, batch_size=2,
                               sigma_min=1e-3)
        optimizer_step(state, (np.zeros(1), np.array([5.0])), cfg)
        assert state.pdod.sigma[0] == 1e-3

    def test_ddode_freezes_sigma(self):
        state = self.state(sigma=(2.0,))
        cfg = EstimationConfig(learning_rate=0.5, num_samples=2, batch_size=2,
                               ddode_mode=True)
        optimizer_step(state, (np.array([1.0]), np.array([9.0])), cfg)
        assert state.pdod.sigma[0] == 2.0

    def test_nonfinite_gradient_raises(self):
        state = self.state()
        cfg = EstimationConfig(num_samples=2, batch_size=2)
        with pytest.raises(EstimationError):
            optimizer_step(state, (np.array([np.nan]), np.zeros(1)), cfg)

    def test_adam_first_step_matches_recurrence(self):
        state = self.state(q=(5.0,))
        cfg = EstimationConfig(optimizer="adam", learning_rate=0.1,
                               num_samples=2, batch_size=2)
        g = 0.7
        optimizer_step(state, (np.array([g]), np.zeros(1)), cfg)
        # First Adam step: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps).
        expected = 5.0 - 0.1 * g / (abs(g) + 1e-8)
        assert state.pdod.q[0] == pytest.approx(expected, rel=1e-9)

    def test_adadelta_first_step_matches_recurrence(self):
        state = self.state(q=(5.0,))
        cfg = EstimationConfig(optimizer="adadelta", learning_rate=1.0,
                               num_samples=2, batch_size=2)
        g = 0.7
        optimizer_step(state, (np.array([g]), np.zeros(1)), cfg)
        eps, rho = 1e-6, 0.95
        expected_step = -np.sqrt(eps) / np.sqrt((1 - rho) * g**2 + eps) * g
        assert state.pdod.q[0] == pytest.approx(5.0 + expected_step, rel=1e-9)


class TestEstimate:
    def recovery_setup(self, days=40, noise=0.0, seed=5):
        """Single OD, single path, fully determined demand."""
        from conftest import make_network
        from pdode.net import Link

        links = [
            Link(id=1, from_node=1, to_node=2, length=0.5, free_flow_speed=18.0,
                 capacity=4000.0),
        ]
        net = make_network(links, [(1, 2)])
        paths = enumerate_paths(net, 2)
        grid = TimeGrid(num_intervals=4, interval_length=100.0)
        truth = PDOD(q=np.full(4, 20.0), sigma=np.full(4, 2.0))
        choice = uniform_choice(paths, grid.num_intervals, dispersion=0.1)
        obs = simulate_observations(
            net, paths, grid, truth, choice, days, (1,), noise_std=noise, seed=seed
        )
        return net, paths, grid, truth, obs

    def test_recovers_determined_demand(self):
        # Small-L runs shrink the std estimate (the batch objective
        # penalizes summary variance), so keep L large enough here.
        net, paths, grid, truth, obs = self.recovery_setup()
        cfg = EstimationConfig(
            distance_kind="w2", num_samples=24, batch_size=20,
            learning_rate=1.0, max_epochs=120, seed=2,
        )
        state = estimate(net, paths, grid, obs.flows, obs.observed_indices(net), cfg)
        assert abs(np.mean(state.pdod.q) - 20.0) / 20.0 < 0.05
        assert abs(np.mean(state.pdod.sigma) - 2.0) / 2.0 < 0.15
        losses = [v for _, v in state.loss_history]
        assert losses[-1] < losses[0]

    def test_rejects_too_few_days(self):
        net, paths, grid, truth, obs = self.recovery_setup(days=2)
        cfg = EstimationConfig(num_samples=4, batch_size=2, max_epochs=2, seed=1)
        with pytest.raises(ValueError):
            estimate(net, paths, grid, obs.flows[:1], obs.observed_indices(net), cfg)

    def test_same_seed_same_history(self):
        net, paths, grid, truth, obs = self.recovery_setup(days=12)
        cfg = EstimationConfig(num_samples=4, batch_size=4, max_epochs=5, seed=7)
        a = estimate(net, paths, grid, obs.flows, obs.observed_indices(net), cfg)
        b = estimate(net, paths, grid, obs.flows, obs.observed_indices(net), cfg)
        assert a.loss_history == b.loss_history
        np.testing.assert_array_equal(a.pdod.q, b.pdod.q)
        np.testing.assert_array_equal(a.pdod.sigma, b.pdod.sigma)

    def test_warm_start_is_used(self):
        net, paths, grid, truth, obs = self.recovery_setup(days=12)
        cfg = EstimationConfig(num_samples=4, batch_size=4, max_epochs=1, seed=7,
                               learning_rate=1e-9)
        start = PDOD(q=np.full(4, 33.0), sigma=np.full(4, 3.0))
        state = estimate(net, paths, grid, obs.flows, obs.observed_indices(net),
                         cfg, initial=start)
        np.testing.assert_allclose(state.pdod.q, 33.0, atol=1e-6)

    def test_checkpoint_round_trip(self, tmp_path):
        net, paths, grid, truth, obs = self.recovery_setup(days=12)
        cfg = EstimationConfig(num_samples=4, batch_size=4, max_epochs=4, seed=7,
                               checkpoint_every=2)
        state = estimate(net, paths, grid, obs.flows, obs.observed_indices(net),
                         cfg, checkpoint_dir=tmp_path)
        again = load_state(tmp_path)
        assert again.epoch == 4
        np.testing.assert_allclose(again.pdod.q, state.pdod.q, rtol=1e-5)
        assert again.loss_history == state.loss_history
        assert "acc_q" in again.opt_state

    def test_initial_pdod_scales_with_data(self):
        cfg = EstimationConfig(num_samples=2, batch_size=2, seed=0)
        obs = np.full((5, 3), 10.0)
        pdod = initial_pdod(obs, 6, cfg)
        assert pdod.q.max() <= 20.0
        assert pdod.q.min() >= 0.0
        np.testing.assert_allclose(pdod.sigma, 0.1 * pdod.q + cfg.sigma_min)


class TestConfigValidation:
    def test_bounds(self):
        with pytest.raises(ValueError):
            EstimationConfig(num_samples=1)
        with pytest.raises(ValueError):
            EstimationConfig(batch_size=1)
        with pytest.raises(ValueError):
            EstimationConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            EstimationConfig(optimizer="sgd")
        with pytest.raises(ValueError):
            EstimationConfig(distance_kind="cosine")

    def test_distance_name_coercion(self):
        cfg = EstimationConfig(distance_kind="bhattacharyya")
        assert cfg.distance_kind is DistanceKind.BHATTACHARYYA
