"""Statistical distances between diagonal-Gaussian flow summaries.

Both sides of a comparison are summarized as a diagonal Gaussian fitted to
a batch of flow vectors.  Every distance here is nonnegative, vanishes
exactly when the two summaries coincide, and carries an analytical
gradient with respect to the simulated-side mean and standard deviation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-9


class DistanceKind(enum.Enum):
    L1 = "l1"
    L2 = "l2"
    W2 = "w2"
    FORWARD_KL = "kl"
    BHATTACHARYYA = "bhattacharyya"

    @classmethod
    def from_name(cls, name: str) -> "DistanceKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise ValueError(
            f"unknown distance {name!r}; choose from {[k.value for k in cls]}"
        )


@dataclass(frozen=True)
class GaussianSummary:
    """Per-entry mean and standard deviation of a batch of flow vectors."""

    mean: np.ndarray
    std: np.ndarray
    sample_count: int
    floored: np.ndarray | None = None  # True where std was raised to the floor

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=float))
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std must have equal length")
        if np.any(self.std < 0):
            raise ValueError("std must be nonnegative")


def fit_summary(batch, ddof: int = 1) -> GaussianSummary:
    """Fit per-entry mean and std to a batch of flow vectors.

    ``ddof=1`` uses the (n-1) divisor and needs at least two vectors.
    Degenerate stds are floored at ``STD_FLOOR`` and flagged so gradient
    code can zero the flow through them.
    """
    arr = np.asarray(batch, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("batch must be a nonempty list of flow vectors")
    n = arr.shape[0]
    if ddof not in (0, 1):
        raise ValueError("ddof must be 0 or 1")
    if n - ddof < 1:
        raise ValueError(f"ddof={ddof} requires at least {ddof + 1} vectors, got {n}")
    mean = arr.mean(axis=0)
    std = np.sqrt(np.sum((arr - mean) ** 2, axis=0) / (n - ddof))
    floored = std < STD_FLOOR
    return GaussianSummary(
        mean=mean,
        std=np.maximum(std, STD_FLOOR),
        sample_count=n,
        floored=floored,
    )


def _check_pair(obs: GaussianSummary, sim: GaussianSummary) -> None:
    if obs.mean.shape != sim.mean.shape:
        raise ValueError(
            f"summary dimension mismatch: {obs.mean.shape} vs {sim.mean.shape}"
        )


def _require_positive_std(summary: GaussianSummary, side: str) -> None:
    if np.any(summary.std <= 0):
        raise ValueError(f"{side} summary has nonpositive std entries")


def distance(kind: DistanceKind, obs: GaussianSummary, sim: GaussianSummary) -> float:
    """Statistical distance between two diagonal-Gaussian summaries."""
    _check_pair(obs, sim)
    dm = obs.mean - sim.mean
    if kind is DistanceKind.L1:
        return float(np.sum(np.abs(dm)) + np.sum(np.abs(obs.std**2 - sim.std**2)))
    if kind is DistanceKind.L2:
        return float(np.sum(dm**2) + np.sum((obs.std**2 - sim.std**2) ** 2))
    if kind is DistanceKind.W2:
        return float(np.sum(dm**2) + np.sum((obs.std - sim.std) ** 2))
    if kind is DistanceKind.FORWARD_KL:
        _require_positive_std(obs, "observed")
        _require_positive_std(sim, "simulated")
        terms = (
            2.0 * np.log(obs.std / sim.std)
            + (sim.std**2 + dm**2) / obs.std**2
            - 1.0
        )
        return float(0.5 * np.sum(terms))
    if kind is DistanceKind.BHATTACHARYYA:
        _require_positive_std(obs, "observed")
        _require_positive_std(sim, "simulated")
        sbar2 = 0.5 * (obs.std**2 + sim.std**2)
        terms = 0.125 * dm**2 / sbar2 + 0.5 * np.log(sbar2 / (obs.std * sim.std))
        return float(np.sum(terms))
    raise ValueError(f"unknown distance kind {kind}")


def distance_gradient(
    kind: DistanceKind, obs: GaussianSummary, sim: GaussianSummary
) -> tuple[np.ndarray, np.ndarray]:
    """Analytical gradient of :func:`distance` w.r.t. the simulated summary.

    Returns ``(d/d sim.mean, d/d sim.std)``.  For L1 the subgradient at a
    tie is taken as zero.
    """
    _check_pair(obs, sim)
    m, s = sim.mean, sim.std
    dm = m - obs.mean  # gradient direction: simulated minus observed
    if kind is DistanceKind.L1:
        g_mean = np.sign(dm)
        g_std = np.sign(s**2 - obs.std**2) * 2.0 * s
        return g_mean, g_std
    if kind is DistanceKind.L2:
        g_mean = 2.0 * dm
        g_std = 4.0 * s * (s**2 - obs.std**2)
        return g_mean, g_std
    if kind is DistanceKind.W2:
        g_mean = 2.0 * dm
        g_std = 2.0 * (s - obs.std)
        return g_mean, g_std
    if kind is DistanceKind.FORWARD_KL:
        _require_positive_std(obs, "observed")
        _require_positive_std(sim, "simulated")
        g_mean = dm / obs.std**2
        g_std = -1.0 / s + s / obs.std**2
        return g_mean, g_std
    if kind is DistanceKind.BHATTACHARYYA:
        _require_positive_std(obs, "observed")
        _require_positive_std(sim, "simulated")
        sbar2 = 0.5 * (obs.std**2 + s**2)
        g_mean = 0.25 * dm / sbar2
        g_std = -0.125 * dm**2 * s / sbar2**2 + 0.5 * s / sbar2 - 0.5 / s
        return g_mean, g_std
    raise ValueError(f"unknown distance kind {kind}")


def chain_to_samples(
    kind: DistanceKind,
    obs: GaussianSummary,
    sim_batch,
    ddof: int = 1,
) -> np.ndarray:
    """Per-sample gradients of the batch distance w.r.t. each flow vector.

    The simulated summary is fitted to ``sim_batch`` and the distance
    gradient is chained through the batch statistics:
    ``d mean / d x_l = 1/L`` and ``d std_d / d x_l_d =
    (x_l_d - mean_d) / ((L - ddof) * std_d)``.  Entries whose std sat at
    the floor get zero gradient through the std path.  Returns an
    ``(L, D)`` array, one gradient row per sample.
    """
    arr = np.asarray(sim_batch, dtype=float)
    if arr.ndim != 2:
        raise ValueError("sim_batch must be a 2-D (L, D) array of flow vectors")
    n = arr.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples for std sensitivity")
    sim = fit_summary(arr, ddof=ddof)
    g_mean, g_std = distance_gradient(kind, obs, sim)
    dstd = (arr - sim.mean) / ((n - ddof) * sim.std)
    if sim.floored is not None:
        dstd[:, sim.floored] = 0.0
    return g_mean / n + g_std * dstd
