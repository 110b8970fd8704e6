"""Dynamic network loading: a discrete-time point-queue link model.

Path departures per interval are propagated through the network under
these rules:

* Flow rates are uniform within each interval: departures, link entries,
  and link exits are all treated as evenly spread over the interval in
  which they occur, so cumulative inflow/outflow curves are piecewise
  linear with breakpoints at interval boundaries.
* A vehicle entering link ``a`` at time ``t`` reaches the link exit at
  ``t + fftt_a``; per link and interval, outflow equals
  ``min(queued + arriving, capacity * interval_length / 3600)``.
* Exits obey FIFO; cohorts entering a link during the same interval are
  mixed proportionally.
* OD connectors pass flow through with zero delay and no capacity bound.

The loading yields link travel times (horizontal distance between the
cumulative curves at each entry cohort's midpoint, never below free
flow), path travel times (chained link entry times from the departure
midpoint), and the sparse dynamic-assignment-ratio matrix mapping each
(path, departure interval) cohort to its per-(link, interval) arrival
fractions.  Arrival here means entering the link, which is what a count
detector at the link upstream end would record.

Cohorts are identified by their flat position ``h * num_paths + k`` in
the path-flow vector, which doubles as their column in the ratio matrix.
The per-step loops are JIT-compiled (see ``_kernels``).
"""

from __future__ import annotations

import heapq
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import _kernels

EPS_FLOW = 1e-13
RHO_DROP = 1e-12


@dataclass
class LinkState:
    """Cumulative inflow/outflow (vehicles) at interval boundaries."""

    cum_in: np.ndarray
    cum_out: np.ndarray


@dataclass
class DnlResult:
    """Outputs of one loading run.

    ``link_times`` has one entry per (link, entry interval), seconds;
    ``path_times`` one per (path, departure interval), seconds; ``dar``
    is the sparse (N*|A|) x (N*Pi) matrix of arrival fractions.
    """

    link_times: np.ndarray
    path_times: np.ndarray
    dar: sparse.csr_matrix
    link_states: list[LinkState]
    total_departed: float
    total_exited: float
    cleared: bool


def default_horizon_extension(net, paths, grid) -> int:
    """Extra intervals appended so tail cohorts can traverse and clear."""
    from .net import path_free_flow_times

    longest = max(path_free_flow_times(net, paths), default=0.0)
    return max(1, math.ceil(2.0 * longest / grid.interval_length))


def link_flows(dar: sparse.spmatrix, path_flows: np.ndarray) -> np.ndarray:
    """Arrival-based link flow per (link, interval): the product dar @ F."""
    path_flows = np.asarray(path_flows, dtype=float)
    if path_flows.ndim != 1 or dar.shape[1] != path_flows.size:
        raise ValueError(
            f"dimension mismatch: dar is {dar.shape}, path flows length {path_flows.size}"
        )
    return np.asarray(dar @ path_flows)


class _Topology:
    """Static per-(network, path table) structures, reusable across runs."""

    def __init__(self, net, paths, grid):
        self.A = net.num_links
        self.Pi = paths.num_paths
        self.N = grid.num_intervals
        self.fftt = np.array([l.free_flow_time for l in net.links])
        self.cap_step = np.array(
            [
                math.inf if l.is_connector else l.capacity * grid.interval_length / 3600.0
                for l in net.links
            ]
        )
        path_links = [
            tuple(net.link_index(lid) for lid in seq) for seq in paths.link_ids
        ]
        self.max_path_len = max(len(seq) for seq in path_links)
        self.path_ptr = np.zeros(self.Pi + 1, dtype=np.int64)
        self.path_flat = np.empty(sum(len(s) for s in path_links), dtype=np.int64)
        pos = 0
        for k, seq in enumerate(path_links):
            for a in seq:
                self.path_flat[pos] = a
                pos += 1
            self.path_ptr[k + 1] = pos

        # Loop-free paths visit each link at most once, so (link, path)
        # has a unique successor: -1 denotes the network exit.
        next_table = np.full((self.A, self.Pi), -2, dtype=np.int64)
        self.first_link = np.empty(self.Pi, dtype=np.int64)
        for k, seq in enumerate(path_links):
            self.first_link[k] = seq[0]
            for p, a in enumerate(seq):
                next_table[a, k] = seq[p + 1] if p + 1 < len(seq) else -1

        # Flattened routing: per link, the cohort entries that exit the
        # network, and per downstream link the cohort entries moving there.
        exit_chunks, route_chunks = [], []
        self.exit_ptr = np.zeros(self.A + 1, dtype=np.int64)
        route_ptr = [0]
        route_target = []
        route_idx_ptr = [0]
        for a in range(self.A):
            cohort_next = np.tile(next_table[a], self.N)
            exits = np.flatnonzero(cohort_next == -1).astype(np.int64)
            exit_chunks.append(exits)
            self.exit_ptr[a + 1] = self.exit_ptr[a] + exits.size
            for b in sorted(int(t) for t in np.unique(next_table[a]) if t >= 0):
                idx = np.flatnonzero(cohort_next == b).astype(np.int64)
                route_target.append(b)
                route_chunks.append(idx)
                route_idx_ptr.append(route_idx_ptr[-1] + idx.size)
            route_ptr.append(len(route_target))
        self.exit_flat = (
            np.concatenate(exit_chunks) if exit_chunks else np.empty(0, dtype=np.int64)
        )
        self.route_ptr = np.asarray(route_ptr, dtype=np.int64)
        self.route_target = np.asarray(route_target, dtype=np.int64)
        self.route_idx_ptr = np.asarray(route_idx_ptr, dtype=np.int64)
        self.route_idx_flat = (
            np.concatenate(route_chunks) if route_chunks else np.empty(0, dtype=np.int64)
        )
        self.order = self._processing_order(next_table)

    def _processing_order(self, next_table: np.ndarray) -> np.ndarray:
        """Links ordered so upstream precedes downstream where possible.

        Same-step transfers then resolve in a single pass.  Any cyclic
        remainder (possible when different paths traverse a ring in
        opposite senses) is appended in index order; the propagation's
        outer pass loop covers those cases.
        """
        successors: list[set[int]] = [set() for _ in range(self.A)]
        indegree = [0] * self.A
        for a in range(self.A):
            for b in np.unique(next_table[a]):
                if b >= 0 and b not in successors[a]:
                    successors[a].add(int(b))
                    indegree[b] += 1
        ready = [a for a in range(self.A) if indegree[a] == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            a = heapq.heappop(ready)
            order.append(a)
            for b in sorted(successors[a]):
                indegree[b] -= 1
                if indegree[b] == 0:
                    heapq.heappush(ready, b)
        placed = set(order)
        order.extend(a for a in range(self.A) if a not in placed)
        return np.asarray(order, dtype=np.int64)


# Keyed by object identity; entries hold strong references to their net
# and path table so ids cannot be recycled while cached.
_topology_cache: dict[tuple[int, int, int, float], tuple] = {}


def _topology_for(net, paths, grid) -> _Topology:
    key = (id(net), id(paths), grid.num_intervals, grid.interval_length)
    entry = _topology_cache.get(key)
    if entry is not None and entry[0] is net and entry[1] is paths:
        return entry[2]
    if len(_topology_cache) > 32:
        _topology_cache.clear()
    topo = _Topology(net, paths, grid)
    _topology_cache[key] = (net, paths, topo)
    return topo


def run_dnl(
    net,
    paths,
    grid,
    path_flows: np.ndarray,
    horizon_extension: int | None = None,
) -> DnlResult:
    """Load path departures onto the network and collect times and ratios.

    ``path_flows`` holds vehicles per (path, departure interval) in the
    interval-major layout.  ``horizon_extension`` adds intervals beyond
    the study period so tail cohorts can clear; the default is twice the
    longest free-flow path time.  A warning is issued if flow is still in
    the network at the end of the extended horizon.
    """
    N = grid.num_intervals
    dt = grid.interval_length
    topo = _topology_for(net, paths, grid)
    A, Pi = topo.A, topo.Pi
    path_flows = np.asarray(path_flows, dtype=float)
    if path_flows.shape != (N * Pi,):
        raise ValueError(
            f"path flow vector must have length {N * Pi}, got {path_flows.shape}"
        )
    if not np.all(np.isfinite(path_flows)):
        raise ValueError("path flow vector contains nonfinite entries")
    if np.any(path_flows < 0):
        raise ValueError("path flow vector must be nonnegative")
    if horizon_extension is None:
        horizon_extension = default_horizon_extension(net, paths, grid)
    S = N + int(horizon_extension)

    F2d = path_flows.reshape(N, Pi)
    U = np.zeros((A, S + 1))
    V = np.zeros((A, S + 1))
    contrib = np.zeros((A, S, N * Pi))
    drain_ptr = np.zeros(A, dtype=np.int64)
    total_exited = _kernels.propagate(
        N, S, A, Pi, dt,
        F2d, path_flows, topo.fftt, topo.cap_step,
        U, V, contrib,
        topo.first_link, topo.order,
        topo.exit_ptr, topo.exit_flat,
        topo.route_ptr, topo.route_target, topo.route_idx_ptr, topo.route_idx_flat,
        drain_ptr, topo.max_path_len + 2,
    )

    total_departed = float(path_flows.sum())
    remaining = float(np.max(U[:, S] - V[:, S], initial=0.0))
    cleared = remaining <= 1e-9 * max(total_departed, 1.0)
    if not cleared:
        warnings.warn(
            f"loading horizon too short: {remaining:.3g} vehicles still in the network",
            stacklevel=2,
        )

    link_times = _kernels.link_travel_times(
        U, V, topo.fftt, topo.cap_step, N, S, A, dt
    )
    max_probes = int(topo.path_flat.size) * N
    probe_rows = np.empty(max_probes, dtype=np.int64)
    probe_cols = np.empty(max_probes, dtype=np.int64)
    path_times, n_probe = _kernels.path_probes(
        U, V, topo.fftt, topo.cap_step, topo.path_ptr, topo.path_flat,
        F2d, N, S, A, Pi, dt, probe_rows, probe_cols,
    )

    # Assemble the sparse ratio matrix: realized cohort fractions plus the
    # unit probe entries for cohorts that carried no flow.
    i_link, i_step, i_cohort = np.nonzero(contrib[:, :N, :])
    vals = contrib[i_link, i_step, i_cohort] / path_flows[i_cohort]
    keep = vals > RHO_DROP
    rows = np.concatenate([probe_rows[:n_probe], (i_step * A + i_link)[keep]])
    cols = np.concatenate([probe_cols[:n_probe], i_cohort[keep]])
    data = np.concatenate([np.ones(n_probe), vals[keep]])
    dar = sparse.csr_matrix(
        sparse.coo_matrix((data, (rows, cols)), shape=(N * A, N * Pi))
    )

    states = [LinkState(cum_in=U[a].copy(), cum_out=V[a].copy()) for a in range(A)]
    return DnlResult(
        link_times=link_times,
        path_times=path_times,
        dar=dar,
        link_states=states,
        total_departed=total_departed,
        total_exited=float(total_exited),
        cleared=cleared,
    )
