"""Demand estimation: forward loss, reverse-mode gradients, adaptive updates.

Each forward pass samples demand via the reparameterized form, loads the
samples, summarizes the simulated observed-link flows, and scores them
against an observed-day summary with a statistical distance.  The
backward pass pulls the distance gradient through the batch statistics,
the sparse assignment ratios, and the route-choice map back to the
demand mean and standard deviation; assignment ratios and route shares
are treated as constants.  Updates use Adagrad, Adam, or AdaDelta with a
projection onto the feasible set (nonnegative means, floored standard
deviations).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from . import demand as demand_mod
from .behavior import RouteChoiceMatrix, logit_choice
from .demand import PDOD, sample_demand, substream
from .distance import DistanceKind, GaussianSummary, chain_to_samples, distance, fit_summary
from .dnl import link_flows, run_dnl
from .net import path_free_flow_times

INIT_STREAM = 0
SHUFFLE_STREAM = 1
SAMPLE_STREAM = 2

OPTIMIZERS = ("adagrad", "adam", "adadelta")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAGRAD_EPS = 1e-10
ADADELTA_DECAY = 0.95
ADADELTA_EPS = 1e-6


class EstimationError(RuntimeError):
    """Raised when an update cannot proceed (e.g. nonfinite gradients)."""


@dataclass
class EstimationConfig:
    """Knobs for one estimation run; see field names for meaning."""

    distance_kind: DistanceKind = DistanceKind.W2
    num_samples: int = 10  # demand samples per forward pass
    batch_size: int = 10  # observed days per mini-batch
    optimizer: str = "adagrad"
    learning_rate: float = 0.3
    max_epochs: int = 200
    tolerance: float = 1e-3  # on the largest per-step change of q and sigma
    seed: int = 0
    ddof: int = 1
    sigma_min: float = demand_mod.SIGMA_MIN
    ddode_mode: bool = False  # freeze sigma at the floor, estimate means only
    dispersion: float = 0.1
    horizon_extension: int | None = None
    q_init_max: float | None = None  # default: twice the mean observed flow
    sigma_init_ratio: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.distance_kind, str):
            self.distance_kind = DistanceKind.from_name(self.distance_kind)
        if self.num_samples < 2:
            raise ValueError("num_samples must be >= 2")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.ddof not in (0, 1):
            raise ValueError("ddof must be 0 or 1")
        if self.sigma_min < demand_mod.SIGMA_MIN:
            raise ValueError(f"sigma_min must be >= {demand_mod.SIGMA_MIN}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class ForwardTape:
    """Everything the backward pass needs from one forward pass."""

    nus: np.ndarray  # (L, NK) noise draws
    active: np.ndarray  # (L, NK) clamp masks
    choice: RouteChoiceMatrix
    dars: list[sparse.csr_matrix]
    sim_flows: np.ndarray  # (L, D) simulated flows on observed entries
    mean_path_times: np.ndarray  # (N*Pi,) averaged over samples
    obs_summary: GaussianSummary
    observed_idx: np.ndarray
    num_flow_entries: int  # N * |A|
    loss: float


@dataclass
class EstimationState:
    """Current iterate, optimizer accumulators, and run history."""

    pdod: PDOD
    num_od_pairs: int
    opt_state: dict = field(default_factory=dict)
    epoch: int = 0
    loss_history: list[tuple[int, float]] = field(default_factory=list)
    status: str = "running"


def forward_pass(
    net,
    paths,
    grid,
    pdod: PDOD,
    choice: RouteChoiceMatrix,
    obs_batch: np.ndarray,
    observed_idx: np.ndarray,
    cfg: EstimationConfig,
    sample_key: tuple[int, ...] = (0,),
) -> tuple[float, ForwardTape]:
    """Sample, load, summarize, and score one mini-batch.

    ``obs_batch`` holds the batch's observed flow vectors (one day per
    row) on the entries listed in ``observed_idx`` (flat positions into
    the (link, interval) flow vector).  ``sample_key`` namespaces the
    noise streams so repeated calls are reproducible.
    """
    obs_batch = np.asarray(obs_batch, dtype=float)
    if obs_batch.ndim != 2 or obs_batch.shape[0] < 2:
        raise ValueError("obs_batch must be a 2-D array with at least 2 days")
    observed_idx = np.asarray(observed_idx, dtype=int)
    if obs_batch.shape[1] != observed_idx.size:
        raise ValueError("obs_batch width does not match observed_idx")
    L = cfg.num_samples
    nk = pdod.size
    nus = np.empty((L, nk))
    active = np.empty((L, nk), dtype=bool)
    dars = []
    sim_flows = np.empty((L, observed_idx.size))
    cost_sum = np.zeros(grid.num_intervals * paths.num_paths)
    for l in range(L):
        key = (SAMPLE_STREAM,) + tuple(sample_key) + (l,)
        sample = sample_demand(pdod, substream(cfg.seed, *key), stream_key=key)
        nus[l] = sample.nu_ref.nu
        active[l] = sample.active
        flows = choice.apply(sample.Q)
        result = run_dnl(net, paths, grid, flows, cfg.horizon_extension)
        dars.append(result.dar)
        sim_flows[l] = link_flows(result.dar, flows)[observed_idx]
        cost_sum += result.path_times
    obs_summary = fit_summary(obs_batch, ddof=cfg.ddof)
    sim_summary = fit_summary(sim_flows, ddof=cfg.ddof)
    loss = distance(cfg.distance_kind, obs_summary, sim_summary)
    tape = ForwardTape(
        nus=nus,
        active=active,
        choice=choice,
        dars=dars,
        sim_flows=sim_flows,
        mean_path_times=cost_sum / L,
        obs_summary=obs_summary,
        observed_idx=observed_idx,
        num_flow_entries=grid.num_intervals * net.num_links,
        loss=loss,
    )
    return loss, tape


def backward_pass(
    tape: ForwardTape, obs_summary: GaussianSummary, cfg: EstimationConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the forward loss w.r.t. demand mean and std.

    Per sample: the distance gradient w.r.t. the sample's flows is pulled
    back through the transposed assignment ratios and route shares, then
    masked and scaled by the noise draw for the std component.
    """
    per_sample = chain_to_samples(
        cfg.distance_kind, obs_summary, tape.sim_flows, ddof=cfg.ddof
    )
    p_t = tape.choice.to_sparse().T
    nk = tape.nus.shape[1]
    grad_q = np.zeros(nk)
    grad_sigma = np.zeros(nk)
    g_flow = np.zeros(tape.num_flow_entries)
    for l in range(per_sample.shape[0]):
        g_flow[:] = 0.0
        g_flow[tape.observed_idx] = per_sample[l]
        g_path = np.asarray(tape.dars[l].T @ g_flow)
        g_demand = np.asarray(p_t @ g_path)
        mask = tape.active[l]
        grad_q += np.where(mask, g_demand, 0.0)
        grad_sigma += np.where(mask, tape.nus[l] * g_demand, 0.0)
    return grad_q, grad_sigma


def optimizer_step(
    state: EstimationState,
    grads: tuple[np.ndarray, np.ndarray],
    cfg: EstimationConfig,
) -> EstimationState:
    """One adaptive update of (q, sigma) followed by feasibility projection."""
    g_q, g_sigma = (np.asarray(g, dtype=float) for g in grads)
    if not (np.all(np.isfinite(g_q)) and np.all(np.isfinite(g_sigma))):
        bad_q = int(np.sum(~np.isfinite(g_q)))
        bad_s = int(np.sum(~np.isfinite(g_sigma)))
        raise EstimationError(
            f"nonfinite gradients at epoch {state.epoch}: "
            f"{bad_q} mean entries, {bad_s} std entries"
        )
    if cfg.ddode_mode:
        g_sigma = np.zeros_like(g_sigma)
    q = state.pdod.q.copy()
    sigma = state.pdod.sigma.copy()
    opt = state.opt_state
    lr = cfg.learning_rate
    if cfg.optimizer == "adagrad":
        if "acc_q" not in opt:
            opt["acc_q"] = np.zeros_like(q)
            opt["acc_sigma"] = np.zeros_like(sigma)
        opt["acc_q"] += g_q**2
        opt["acc_sigma"] += g_sigma**2
        q -= lr * g_q / np.sqrt(opt["acc_q"] + ADAGRAD_EPS)
        sigma -= lr * g_sigma / np.sqrt(opt["acc_sigma"] + ADAGRAD_EPS)
    elif cfg.optimizer == "adam":
        if "t" not in opt:
            opt["t"] = 0
            for name, ref in (("q", q), ("sigma", sigma)):
                opt[f"m_{name}"] = np.zeros_like(ref)
                opt[f"v_{name}"] = np.zeros_like(ref)
        opt["t"] += 1
        t = opt["t"]
        for name, vec, g in (("q", q, g_q), ("sigma", sigma, g_sigma)):
            opt[f"m_{name}"] = ADAM_BETA1 * opt[f"m_{name}"] + (1 - ADAM_BETA1) * g
            opt[f"v_{name}"] = ADAM_BETA2 * opt[f"v_{name}"] + (1 - ADAM_BETA2) * g**2
            m_hat = opt[f"m_{name}"] / (1 - ADAM_BETA1**t)
            v_hat = opt[f"v_{name}"] / (1 - ADAM_BETA2**t)
            vec -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    else:  # adadelta; learning_rate acts as a plain multiplier (1.0 = standard)
        if "eg_q" not in opt:
            for name in ("q", "sigma"):
                opt[f"eg_{name}"] = np.zeros_like(q)
                opt[f"edx_{name}"] = np.zeros_like(q)
        for name, vec, g in (("q", q, g_q), ("sigma", sigma, g_sigma)):
            opt[f"eg_{name}"] = ADADELTA_DECAY * opt[f"eg_{name}"] + (1 - ADADELTA_DECAY) * g**2
            step = (
                -np.sqrt(opt[f"edx_{name}"] + ADADELTA_EPS)
                / np.sqrt(opt[f"eg_{name}"] + ADADELTA_EPS)
                * g
            )
            opt[f"edx_{name}"] = ADADELTA_DECAY * opt[f"edx_{name}"] + (1 - ADADELTA_DECAY) * step**2
            vec += lr * step
    q = np.maximum(q, 0.0)
    if cfg.ddode_mode:
        sigma = state.pdod.sigma.copy()
    else:
        sigma = np.maximum(sigma, cfg.sigma_min)
    state.pdod = PDOD(q=q, sigma=sigma)
    return state


def initial_pdod(
    observations: np.ndarray, nk: int, cfg: EstimationConfig
) -> PDOD:
    """Random start: q ~ Uniform(0, q_init_max), sigma proportional to q."""
    q_max = cfg.q_init_max
    if q_max is None:
        scale = float(np.mean(observations)) if observations.size else 0.0
        q_max = 2.0 * scale if scale > 0 else 1.0
    rng = substream(cfg.seed, INIT_STREAM)
    q = rng.uniform(0.0, q_max, nk)
    if cfg.ddode_mode:
        sigma = np.full(nk, cfg.sigma_min)
    else:
        sigma = cfg.sigma_init_ratio * q + cfg.sigma_min
    return PDOD(q=q, sigma=sigma)


def estimate(
    net,
    paths,
    grid,
    observations: np.ndarray,
    observed_idx: np.ndarray,
    cfg: EstimationConfig,
    initial: PDOD | None = None,
    checkpoint_dir=None,
) -> EstimationState:
    """Run the full estimation loop over the observed days.

    ``observations`` is a (days, D) matrix of observed flows on the
    entries in ``observed_idx``.  Each epoch shuffles the days into
    mini-batches; per batch the route shares are refreshed from the most
    recent mean path costs, then a forward/backward/update step runs.
    Convergence is declared when every step in an epoch moves q and
    sigma by less than the tolerance.
    """
    observations = np.asarray(observations, dtype=float)
    observed_idx = np.asarray(observed_idx, dtype=int)
    if observations.ndim != 2 or observations.shape[0] < 2:
        raise ValueError("need at least 2 observed days")
    if observations.shape[1] != observed_idx.size:
        raise ValueError("observations width does not match observed_idx")
    nk = grid.num_intervals * net.num_od_pairs
    if initial is None:
        pdod = initial_pdod(observations, nk, cfg)
    else:
        if initial.size != nk:
            raise ValueError(f"initial PDOD has length {initial.size}, expected {nk}")
        pdod = initial
    state = EstimationState(pdod=pdod, num_od_pairs=net.num_od_pairs)
    num_days = observations.shape[0]
    free_flow_costs = np.tile(path_free_flow_times(net, paths), grid.num_intervals)
    last_costs = free_flow_costs
    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        perm = substream(cfg.seed, SHUFFLE_STREAM, epoch).permutation(num_days)
        num_batches = max(1, num_days // cfg.batch_size)
        batch_losses = []
        epoch_delta = 0.0
        for b, day_idx in enumerate(np.array_split(perm, num_batches)):
            choice = logit_choice(last_costs, paths, cfg.dispersion)
            loss, tape = forward_pass(
                net,
                paths,
                grid,
                state.pdod,
                choice,
                observations[day_idx],
                observed_idx,
                cfg,
                sample_key=(epoch, b),
            )
            grads = backward_pass(tape, tape.obs_summary, cfg)
            prev_q, prev_sigma = state.pdod.q, state.pdod.sigma
            optimizer_step(state, grads, cfg)
            step_delta = max(
                float(np.max(np.abs(state.pdod.q - prev_q))),
                float(np.max(np.abs(state.pdod.sigma - prev_sigma))),
            )
            epoch_delta = max(epoch_delta, step_delta)
            batch_losses.append(loss)
            last_costs = tape.mean_path_times
        state.loss_history.append((epoch, float(np.mean(batch_losses))))
        if checkpoint_dir is not None and cfg.checkpoint_every > 0:
            if epoch % cfg.checkpoint_every == 0:
                save_state(state, checkpoint_dir)
        if epoch_delta < cfg.tolerance:
            state.status = "converged"
            return state
    state.status = "max_epochs"
    return state


def save_state(state: EstimationState, directory) -> None:
    """Checkpoint the iterate, accumulators, and loss history to a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    demand_mod.pdod_to_csv(state.pdod, state.num_od_pairs, directory / "pdod.csv")
    arrays = {f"opt_{k}": np.asarray(v) for k, v in state.opt_state.items()}
    np.savez(directory / "optimizer.npz", **arrays)
    meta = {
        "epoch": state.epoch,
        "status": state.status,
        "num_od_pairs": state.num_od_pairs,
        "loss_history": [[int(e), float(v)] for e, v in state.loss_history],
    }
    with open(directory / "state.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_state(directory) -> EstimationState:
    """Restore a checkpoint written by :func:`save_state`."""
    directory = Path(directory)
    pdod = demand_mod.pdod_from_csv(directory / "pdod.csv")
    with open(directory / "state.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    opt_state: dict = {}
    with np.load(directory / "optimizer.npz") as data:
        for key in data.files:
            value = data[key]
            opt_state[key[4:]] = int(value) if value.ndim == 0 else value
    return EstimationState(
        pdod=pdod,
        num_od_pairs=int(meta["num_od_pairs"]),
        opt_state=opt_state,
        epoch=int(meta["epoch"]),
        loss_history=[(int(e), float(v)) for e, v in meta["loss_history"]],
        status=str(meta["status"]),
    )
