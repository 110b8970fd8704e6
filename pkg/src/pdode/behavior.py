"""Route choice and the statistical-equilibrium fixed point.

Route shares are deterministic Logit proportions on the mean path travel
time within each (OD pair, departure interval) group.  The equilibrium
loop alternates sampled loadings with a method-of-successive-averages
update of the shares until they stabilize.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .demand import PDOD, sample_demand, substream
from .dnl import DnlResult, run_dnl

EQUILIBRIUM_STREAM = 4  # substream namespace for equilibrium sampling


@dataclass
class RouteChoiceMatrix:
    """Column-stochastic map from OD demand entries to path flow entries.

    ``probs[h, k]`` is the share of OD demand in interval ``h`` assigned
    to path ``k`` within its own OD group; shares over each (OD, interval)
    group sum to one.
    """

    probs: np.ndarray  # (N, Pi)
    dispersion: float
    od_of: tuple[int, ...]
    num_od_pairs: int
    _matrix: sparse.csr_matrix | None = field(default=None, repr=False, compare=False)

    @property
    def num_intervals(self) -> int:
        return self.probs.shape[0]

    @property
    def num_paths(self) -> int:
        return self.probs.shape[1]

    def to_sparse(self) -> sparse.csr_matrix:
        """The (N*Pi) x (N*K) matrix with entries at matching intervals."""
        if self._matrix is None:
            N, Pi = self.probs.shape
            K = self.num_od_pairs
            od = np.asarray(self.od_of, dtype=int)
            h_idx = np.repeat(np.arange(N), Pi)
            k_idx = np.tile(np.arange(Pi), N)
            rows = h_idx * Pi + k_idx
            cols = h_idx * K + od[k_idx]
            vals = self.probs.reshape(-1)
            self._matrix = sparse.csr_matrix(
                sparse.coo_matrix((vals, (rows, cols)), shape=(N * Pi, N * K))
            )
        return self._matrix

    def apply(self, od_vector: np.ndarray) -> np.ndarray:
        """Path flow vector from an OD demand vector."""
        return np.asarray(self.to_sparse() @ np.asarray(od_vector, dtype=float))

    def column_sums(self) -> np.ndarray:
        """Share totals per (OD, interval); 1.0 wherever an OD has paths."""
        N, _ = self.probs.shape
        sums = np.zeros((N, self.num_od_pairs))
        for k, od in enumerate(self.od_of):
            sums[:, od] += self.probs[:, k]
        return sums


def _group_indices(paths) -> list[np.ndarray]:
    od_of = np.asarray(paths.od_of, dtype=int)
    num_od = int(od_of.max()) + 1 if od_of.size else 0
    return [np.flatnonzero(od_of == od) for od in range(num_od)]


def logit_choice(mean_path_costs: np.ndarray, paths, dispersion: float) -> RouteChoiceMatrix:
    """Logit shares on mean path costs within each (OD, interval) group.

    Exponents are shifted by the group maximum so large cost spreads do
    not overflow.
    """
    costs = np.asarray(mean_path_costs, dtype=float)
    if not np.all(np.isfinite(costs)):
        raise ValueError("path costs must be finite")
    if not dispersion > 0:
        raise ValueError("dispersion must be positive")
    Pi = paths.num_paths
    if costs.size % Pi != 0:
        raise ValueError(f"cost vector length {costs.size} is not a multiple of {Pi}")
    N = costs.size // Pi
    groups = _group_indices(paths)
    if any(g.size == 0 for g in groups):
        raise ValueError("some OD pair has an empty path group")
    per_interval = costs.reshape(N, Pi)
    probs = np.empty((N, Pi))
    for g in groups:
        z = -dispersion * per_interval[:, g]
        z -= z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        probs[:, g] = ez / ez.sum(axis=1, keepdims=True)
    num_od = int(max(paths.od_of)) + 1
    return RouteChoiceMatrix(
        probs=probs, dispersion=dispersion, od_of=tuple(paths.od_of), num_od_pairs=num_od
    )


def uniform_choice(paths, num_intervals: int, dispersion: float) -> RouteChoiceMatrix:
    """Equal shares within each OD group; the fixed-point starting guess."""
    groups = _group_indices(paths)
    probs = np.empty((num_intervals, paths.num_paths))
    for g in groups:
        probs[:, g] = 1.0 / g.size
    num_od = int(max(paths.od_of)) + 1
    return RouteChoiceMatrix(
        probs=probs, dispersion=dispersion, od_of=tuple(paths.od_of), num_od_pairs=num_od
    )


@dataclass
class EquilibriumResult:
    choice: RouteChoiceMatrix
    loadings: list[DnlResult]
    converged: bool
    iterations: int
    max_delta: float


def solve_statistical_equilibrium(
    net,
    paths,
    grid,
    pdod: PDOD,
    num_samples: int,
    max_iters: int = 50,
    tol: float = 1e-4,
    dispersion: float = 0.1,
    seed: int = 0,
    horizon_extension: int | None = None,
) -> EquilibriumResult:
    """Fixed point of shares vs. the cost distribution they induce.

    Each iteration samples ``num_samples`` demands, loads them under the
    current shares, averages the resulting path costs, and blends the
    Logit response into the shares with MSA damping (step 1/n).  Stops
    when the largest share change drops below ``tol``; if ``max_iters``
    is hit first the best iterate is returned with ``converged=False``
    and a warning.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    choice = uniform_choice(paths, grid.num_intervals, dispersion)
    loadings: list[DnlResult] = []
    max_delta = np.inf
    iterations = 0
    for n in range(1, max_iters + 1):
        iterations = n
        loadings = []
        cost_sum = np.zeros(grid.num_intervals * paths.num_paths)
        for l in range(num_samples):
            rng = substream(seed, EQUILIBRIUM_STREAM, n, l)
            sample = sample_demand(pdod, rng, stream_key=(EQUILIBRIUM_STREAM, n, l))
            result = run_dnl(net, paths, grid, choice.apply(sample.Q), horizon_extension)
            loadings.append(result)
            cost_sum += result.path_times
        target = logit_choice(cost_sum / num_samples, paths, dispersion)
        step = 1.0 / n
        new_probs = (1.0 - step) * choice.probs + step * target.probs
        max_delta = float(np.max(np.abs(new_probs - choice.probs)))
        choice = RouteChoiceMatrix(
            probs=new_probs,
            dispersion=dispersion,
            od_of=choice.od_of,
            num_od_pairs=choice.num_od_pairs,
        )
        if max_delta < tol:
            return EquilibriumResult(choice, loadings, True, iterations, max_delta)
    warnings.warn(
        f"statistical equilibrium not converged after {max_iters} iterations "
        f"(last share change {max_delta:.3g})",
        stacklevel=2,
    )
    return EquilibriumResult(choice, loadings, False, iterations, max_delta)
