"""Evaluation metrics, synthetic ground truth, and the bottleneck demo.

Estimates are scored with R-squared at three levels: flows on the
observed links (OL), flows on all links (AL), and the demand parameters
themselves (OD).  Flow-level scores compare per-(link, interval) means
and standard deviations of simulated flow, with each demand simulated at
its own equilibrium route shares.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .behavior import RouteChoiceMatrix, solve_statistical_equilibrium
from .demand import PDOD, sample_demand, substream
from .dnl import link_flows, run_dnl
from .estimator import EstimationConfig, estimate
from .net import Network, PathTable, TimeGrid, enumerate_paths
from .networks import build_bottleneck

OBS_STREAM = 3
EVAL_STREAM = 5
TRUTH_STREAM = 6


def r_squared(truth: np.ndarray, estimate: np.ndarray) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot.

    Can be negative (an estimate may be arbitrarily worse than the mean
    predictor).  A constant truth vector has no variance to explain and
    raises ``ValueError``.
    """
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape or truth.ndim != 1 or truth.size == 0:
        raise ValueError("truth and estimate must be equal-length nonempty vectors")
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("truth vector is constant; R-squared is undefined")
    ss_res = float(np.sum((truth - estimate) ** 2))
    return 1.0 - ss_res / ss_tot


@dataclass(frozen=True)
class TriangularDemandSpec:
    """Mean and std profiles that ramp linearly up to a peak and back down.

    ``width`` is the half-width of the ramp in intervals and
    ``peak_interval`` the (0-based, possibly fractional) location of the
    peak; both default to centering the triangle on the study period.
    """

    peak: float
    base: float
    std_peak: float
    std_base: float
    width: float | None = None
    peak_interval: float | None = None

    def __post_init__(self):
        if self.peak < 0 or self.base < 0 or self.std_peak < 0 or self.std_base < 0:
            raise ValueError("demand spec values must be nonnegative")
        if self.peak < self.base or self.std_peak < self.std_base:
            raise ValueError("peak values must not be below base values")

    def profiles(self, num_intervals: int) -> tuple[np.ndarray, np.ndarray]:
        peak_h = self.peak_interval if self.peak_interval is not None else (num_intervals - 1) / 2.0
        width = self.width if self.width is not None else num_intervals / 2.0
        h = np.arange(num_intervals)
        ramp = np.maximum(0.0, 1.0 - np.abs(h - peak_h) / width)
        mean = self.base + (self.peak - self.base) * ramp
        std = self.std_base + (self.std_peak - self.std_base) * ramp
        return mean, std


@dataclass(frozen=True)
class UniformDemandSpec:
    """Each (OD, interval) entry drawn independently from uniform ranges."""

    mean_low: float
    mean_high: float
    std_low: float
    std_high: float

    def __post_init__(self):
        if self.mean_low < 0 or self.std_low < 0:
            raise ValueError("demand spec bounds must be nonnegative")
        if self.mean_high < self.mean_low or self.std_high < self.std_low:
            raise ValueError("upper bounds must not be below lower bounds")


def generate_truth(
    net: Network,
    paths: PathTable,
    grid: TimeGrid,
    demand_spec,
    seed: int = 0,
    dispersion: float = 0.1,
    equilibrium_samples: int = 10,
    equilibrium_max_iters: int = 50,
    equilibrium_tol: float = 1e-4,
    sigma_min: float = 1e-6,
    horizon_extension: int | None = None,
) -> tuple[PDOD, RouteChoiceMatrix]:
    """Build a ground-truth demand and solve its equilibrium route shares."""
    nk = grid.num_intervals * net.num_od_pairs
    if isinstance(demand_spec, TriangularDemandSpec):
        mean, std = demand_spec.profiles(grid.num_intervals)
        q = np.repeat(mean, net.num_od_pairs)
        sigma = np.repeat(std, net.num_od_pairs)
    elif isinstance(demand_spec, UniformDemandSpec):
        rng = substream(seed, TRUTH_STREAM)
        q = rng.uniform(demand_spec.mean_low, demand_spec.mean_high, nk)
        sigma = rng.uniform(demand_spec.std_low, demand_spec.std_high, nk)
    else:
        raise ValueError(f"unsupported demand spec {type(demand_spec).__name__}")
    truth = PDOD(q=q, sigma=np.maximum(sigma, sigma_min))
    equilibrium = solve_statistical_equilibrium(
        net,
        paths,
        grid,
        truth,
        num_samples=equilibrium_samples,
        max_iters=equilibrium_max_iters,
        tol=equilibrium_tol,
        dispersion=dispersion,
        seed=seed,
        horizon_extension=horizon_extension,
    )
    return truth, equilibrium.choice


@dataclass
class ObservationSet:
    """Multi-day observed flows on a subset of links.

    ``flows`` is (days, D) with D = |observed links| * num_intervals,
    laid out interval-major: all observed links for interval 1, then
    interval 2, and so on; links sorted by id within each interval.
    """

    observed_link_ids: tuple[int, ...]
    num_intervals: int
    flows: np.ndarray
    noise_std: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        self.observed_link_ids = tuple(sorted(self.observed_link_ids))
        self.flows = np.asarray(self.flows, dtype=float)
        expected = len(self.observed_link_ids) * self.num_intervals
        if self.flows.ndim != 2 or self.flows.shape[1] != expected:
            raise ValueError(
                f"flows must be (days, {expected}), got {self.flows.shape}"
            )
        if self.flows.shape[0] < 1:
            raise ValueError("need at least one observed day")
        if np.any(self.flows < 0):
            raise ValueError("observed flows must be nonnegative")

    @property
    def days(self) -> int:
        return self.flows.shape[0]

    def observed_indices(self, net: Network) -> np.ndarray:
        """Flat positions of the observed entries in the full flow vector."""
        link_pos = [net.link_index(lid) for lid in self.observed_link_ids]
        idx = [
            h * net.num_links + a
            for h in range(self.num_intervals)
            for a in link_pos
        ]
        return np.asarray(idx, dtype=int)


def observations_to_csv(obs: ObservationSet, out_file) -> None:
    """Rows (day, link_id, interval, flow); day and interval are 1-based."""
    with open(out_file, "w", newline="", encoding="utf-8") as fh:
        fh.write("day,link_id,interval,flow\n")
        num_links = len(obs.observed_link_ids)
        for day in range(obs.days):
            for h in range(obs.num_intervals):
                for j, lid in enumerate(obs.observed_link_ids):
                    value = obs.flows[day, h * num_links + j]
                    fh.write(f"{day + 1},{lid},{h + 1},{value:.6g}\n")


def observations_from_csv(in_file) -> ObservationSet:
    """Read observations written by :func:`observations_to_csv`."""
    records = []
    with open(in_file, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["day", "link_id", "interval", "flow"]:
            raise ValueError(f"{in_file}: unexpected observations header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{in_file}: line {lineno}: expected 4 fields")
            records.append((int(row[0]), int(row[1]), int(row[2]), float(row[3])))
    if not records:
        raise ValueError(f"{in_file}: no observation rows")
    days = sorted({r[0] for r in records})
    link_ids = tuple(sorted({r[1] for r in records}))
    num_intervals = max(r[2] for r in records)
    if days != list(range(1, len(days) + 1)):
        raise ValueError(f"{in_file}: day numbering must be 1..I")
    day_pos = {d: i for i, d in enumerate(days)}
    link_pos = {lid: j for j, lid in enumerate(link_ids)}
    flows = np.full((len(days), len(link_ids) * num_intervals), np.nan)
    for day, lid, h, value in records:
        flows[day_pos[day], (h - 1) * len(link_ids) + link_pos[lid]] = value
    if np.any(np.isnan(flows)):
        raise ValueError(f"{in_file}: missing (day, link, interval) entries")
    return ObservationSet(
        observed_link_ids=link_ids, num_intervals=num_intervals, flows=flows
    )


def simulate_observations(
    net: Network,
    paths: PathTable,
    grid: TimeGrid,
    truth: PDOD,
    choice: RouteChoiceMatrix,
    days: int,
    observed_link_ids,
    noise_std: float = 0.0,
    seed: int = 0,
    horizon_extension: int | None = None,
) -> ObservationSet:
    """Sample one demand per day, load it, and record noisy observed flows."""
    observed_link_ids = tuple(sorted(int(l) for l in observed_link_ids))
    for lid in observed_link_ids:
        net.link_index(lid)  # raises KeyError for unknown ids
    if days < 1:
        raise ValueError("days must be >= 1")
    obs = ObservationSet(
        observed_link_ids=observed_link_ids,
        num_intervals=grid.num_intervals,
        flows=np.zeros((days, len(observed_link_ids) * grid.num_intervals)),
        noise_std=noise_std,
        seed=seed,
    )
    idx = obs.observed_indices(net)
    flows = np.empty((days, idx.size))
    for day in range(days):
        rng = substream(seed, OBS_STREAM, day)
        sample = sample_demand(truth, rng, stream_key=(OBS_STREAM, day))
        path_flows = choice.apply(sample.Q)
        result = run_dnl(net, paths, grid, path_flows, horizon_extension)
        day_flows = link_flows(result.dar, path_flows)[idx]
        if noise_std > 0:
            day_flows = day_flows + noise_std * rng.standard_normal(idx.size)
        flows[day] = np.maximum(day_flows, 0.0)
    obs.flows = flows
    return obs


@dataclass
class EvaluationReport:
    """Six R-squared scores plus the scatter data behind each of them."""

    r2_ol_mean: float
    r2_ol_std: float
    r2_al_mean: float
    r2_al_std: float
    r2_od_mean: float
    r2_od_std: float
    scatter: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def scores(self) -> dict[str, float]:
        return {
            "r2_ol_mean": self.r2_ol_mean,
            "r2_ol_std": self.r2_ol_std,
            "r2_al_mean": self.r2_al_mean,
            "r2_al_std": self.r2_al_std,
            "r2_od_mean": self.r2_od_mean,
            "r2_od_std": self.r2_od_std,
        }


def _simulate_flow_moments(
    net, paths, grid, pdod, choice, num_samples, seed, horizon_extension
) -> tuple[np.ndarray, np.ndarray]:
    """Per-(link, interval) mean and std of flow over sampled loadings."""
    total = grid.num_intervals * net.num_links
    flows = np.empty((num_samples, total))
    for m in range(num_samples):
        rng = substream(seed, EVAL_STREAM, m)
        sample = sample_demand(pdod, rng, stream_key=(EVAL_STREAM, m))
        path_flows = choice.apply(sample.Q)
        result = run_dnl(net, paths, grid, path_flows, horizon_extension)
        flows[m] = link_flows(result.dar, path_flows)
    return flows.mean(axis=0), flows.std(axis=0, ddof=1)


def evaluate(
    truth: PDOD,
    truth_choice: RouteChoiceMatrix,
    estimated: PDOD,
    net: Network,
    paths: PathTable,
    grid: TimeGrid,
    observed_link_ids,
    num_eval_samples: int = 500,
    seed: int = 0,
    dispersion: float = 0.1,
    equilibrium_samples: int = 10,
    equilibrium_max_iters: int = 50,
    equilibrium_tol: float = 1e-4,
    horizon_extension: int | None = None,
) -> EvaluationReport:
    """Score an estimated demand against the truth on OL, AL, and OD.

    The estimated demand is simulated at its own equilibrium shares (the
    truth's shares are not assumed known at evaluation time).
    """
    est_equilibrium = solve_statistical_equilibrium(
        net,
        paths,
        grid,
        estimated,
        num_samples=equilibrium_samples,
        max_iters=equilibrium_max_iters,
        tol=equilibrium_tol,
        dispersion=dispersion,
        seed=seed,
        horizon_extension=horizon_extension,
    )
    true_mean, true_std = _simulate_flow_moments(
        net, paths, grid, truth, truth_choice, num_eval_samples, seed, horizon_extension
    )
    est_mean, est_std = _simulate_flow_moments(
        net, paths, grid, estimated, est_equilibrium.choice, num_eval_samples,
        seed + 1, horizon_extension,
    )
    observed_link_ids = tuple(sorted(int(l) for l in observed_link_ids))
    link_pos = [net.link_index(lid) for lid in observed_link_ids]
    ol_idx = np.asarray(
        [h * net.num_links + a for h in range(grid.num_intervals) for a in link_pos],
        dtype=int,
    )
    scatter = {
        "ol_mean": (true_mean[ol_idx], est_mean[ol_idx]),
        "ol_std": (true_std[ol_idx], est_std[ol_idx]),
        "al_mean": (true_mean, est_mean),
        "al_std": (true_std, est_std),
        "od_mean": (truth.q, estimated.q),
        "od_std": (truth.sigma, estimated.sigma),
    }
    return EvaluationReport(
        r2_ol_mean=r_squared(*scatter["ol_mean"]),
        r2_ol_std=r_squared(*scatter["ol_std"]),
        r2_al_mean=r_squared(*scatter["al_mean"]),
        r2_al_std=r_squared(*scatter["al_std"]),
        r2_od_mean=r_squared(*scatter["od_mean"]),
        r2_od_std=r_squared(*scatter["od_std"]),
        scatter=scatter,
    )


@dataclass
class BottleneckReport:
    """Demand-mean estimates (veh/hour) from both estimators at a bottleneck."""

    true_mean_vph: float
    true_std_vph: float
    ddode_mean_vph: float
    pdode_mean_vph: float
    pdode_std_vph: float
    observed_mean_vph: float

    @property
    def ddode_gap_vph(self) -> float:
        return self.true_mean_vph - self.ddode_mean_vph

    @property
    def pdode_gap_vph(self) -> float:
        return self.true_mean_vph - self.pdode_mean_vph

    def scores(self) -> dict[str, float]:
        return {
            "true_mean_vph": self.true_mean_vph,
            "true_std_vph": self.true_std_vph,
            "observed_mean_vph": self.observed_mean_vph,
            "ddode_mean_vph": self.ddode_mean_vph,
            "pdode_mean_vph": self.pdode_mean_vph,
            "pdode_std_vph": self.pdode_std_vph,
            "ddode_gap_vph": self.ddode_gap_vph,
            "pdode_gap_vph": self.pdode_gap_vph,
        }


def bottleneck_demo(
    capacity_vph: float = 2000.0,
    inflow_mean_vph: float = 2000.0,
    inflow_std_vph: float = 200.0,
    days: int = 200,
    num_intervals: int = 10,
    interval_length: float = 100.0,
    seed: int = 0,
    num_samples: int = 20,
    batch_size: int = 20,
    max_epochs: int = 120,
    learning_rate: float = 0.5,
) -> BottleneckReport:
    """Estimate upstream demand behind a bottleneck with both frameworks.

    When mean inflow sits at the bottleneck capacity, the downstream
    detector sees capacity-censored flow, so matching only its mean
    (the deterministic baseline) under-estimates demand, while matching
    its distribution does not.
    """
    net = build_bottleneck(capacity_vph=capacity_vph)
    paths = enumerate_paths(net, max_paths_per_od=1)
    grid = TimeGrid(num_intervals=num_intervals, interval_length=interval_length)
    per_interval = interval_length / 3600.0
    truth, choice = generate_truth(
        net,
        paths,
        grid,
        TriangularDemandSpec(
            peak=inflow_mean_vph * per_interval,
            base=inflow_mean_vph * per_interval,
            std_peak=max(inflow_std_vph * per_interval, 1e-6),
            std_base=max(inflow_std_vph * per_interval, 1e-6),
        ),
        seed=seed,
        equilibrium_samples=2,
        equilibrium_max_iters=2,
    )
    detector = (3,)  # the link downstream of the bottleneck
    obs = simulate_observations(
        net, paths, grid, truth, choice, days, detector, noise_std=0.0, seed=seed
    )
    observed_idx = obs.observed_indices(net)

    def run(ddode: bool, kind: str):
        cfg = EstimationConfig(
            distance_kind=kind,
            num_samples=num_samples,
            batch_size=batch_size,
            learning_rate=learning_rate,
            max_epochs=max_epochs,
            seed=seed,
            ddode_mode=ddode,
        )
        return estimate(net, paths, grid, obs.flows, observed_idx, cfg)

    ddode_state = run(ddode=True, kind="l2")
    pdode_state = run(ddode=False, kind="w2")
    to_vph = 1.0 / per_interval
    return BottleneckReport(
        true_mean_vph=float(np.mean(truth.q)) * to_vph,
        true_std_vph=float(np.mean(truth.sigma)) * to_vph,
        ddode_mean_vph=float(np.mean(ddode_state.pdod.q)) * to_vph,
        pdode_mean_vph=float(np.mean(pdode_state.pdod.q)) * to_vph,
        pdode_std_vph=float(np.mean(pdode_state.pdod.sigma)) * to_vph,
        observed_mean_vph=float(np.mean(obs.flows)) * to_vph,
    )
