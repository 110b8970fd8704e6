"""Compiled inner loops for the loading engine.

The propagation and probe loops run per sample inside the estimation
loop, so they are JIT-compiled.  All functions work on plain arrays;
ragged per-link structures (route targets, exit cohorts, path link
sequences) arrive flattened with offset pointers.
"""

import numpy as np
from numba import njit

EPS_FLOW = 1e-13


@njit(cache=True)
def propagate(
    N, S, A, Pi, dt,
    F2d, F_flat, fftt, cap_step,
    U, V, contrib,
    first_link, order,
    exit_ptr, exit_flat,
    route_ptr, route_target, route_idx_ptr, route_idx_flat,
    drain_ptr, max_passes,
):
    """Time-stepped point-queue propagation; fills U, V, contrib in place.

    Returns the total flow that left the network.  ``contrib[a, j]`` is
    the dense vehicles-per-cohort vector entering link ``a`` during step
    ``j``; ``route_*`` describe, per link, which cohort entries continue
    to which downstream link; ``exit_*`` list the cohorts that leave the
    network after the link.
    """
    NPi = N * Pi
    pending = np.zeros((A, NPi))
    has_pending = np.zeros(A, dtype=np.bool_)
    exited = 0.0
    for j in range(S):
        for a in range(A):
            U[a, j + 1] = U[a, j]
        if j < N:
            for k in range(Pi):
                veh = F2d[j, k]
                if veh > 0.0:
                    a = first_link[k]
                    pending[a, j * Pi + k] += veh
                    has_pending[a] = True
        out_so_far = np.zeros(A)
        backlog = np.zeros(A, dtype=np.bool_)
        for a in range(A):
            backlog[a] = U[a, j] - V[a, j] > EPS_FLOW
        for _pass in range(max_passes):
            for oi in range(A):
                a = order[oi]
                if has_pending[a]:
                    has_pending[a] = False
                    added = 0.0
                    for c in range(NPi):
                        veh = pending[a, c]
                        if veh > 0.0:
                            contrib[a, j, c] += veh
                            added += veh
                            pending[a, c] = 0.0
                    U[a, j + 1] += added
                elif not backlog[a]:
                    continue
                backlog[a] = True  # flow is on the link until drained
                lo = V[a, j] + out_so_far[a]
                f = fftt[a]
                if f == 0.0:
                    arrived = U[a, j + 1]
                else:
                    pos = (j + 1) - f / dt
                    if pos <= 0.0:
                        arrived = 0.0
                    else:
                        i0 = int(pos)
                        if i0 > j:
                            arrived = U[a, j + 1]
                        else:
                            arrived = U[a, i0] + (pos - i0) * (U[a, i0 + 1] - U[a, i0])
                avail = arrived - lo
                room = cap_step[a] - out_so_far[a]
                x = avail if avail < room else room
                if x <= EPS_FLOW:
                    continue
                # FIFO draw over the cumulative range (lo, lo + x]:
                # consume entry steps in order, proportionally within each.
                hi = lo + x
                parts = np.zeros(NPi)
                actual = 0.0
                jj = drain_ptr[a]
                while jj <= j:
                    seg_lo = U[a, jj]
                    seg_hi = U[a, jj + 1]
                    if seg_hi <= lo + EPS_FLOW:
                        drain_ptr[a] = jj + 1
                        jj += 1
                        continue
                    if seg_lo >= hi:
                        break
                    seg_total = seg_hi - seg_lo
                    if seg_total > EPS_FLOW:
                        top = hi if hi < seg_hi else seg_hi
                        bot = lo if lo > seg_lo else seg_lo
                        fraction = (top - bot) / seg_total
                        if fraction > 0.0:
                            for c in range(NPi):
                                veh = contrib[a, jj, c]
                                if veh > 0.0:
                                    piece = veh * fraction
                                    parts[c] += piece
                                    actual += piece
                    jj += 1
                if actual <= 0.0:
                    continue
                out_so_far[a] += actual
                for e in range(exit_ptr[a], exit_ptr[a + 1]):
                    exited += parts[exit_flat[e]]
                for r in range(route_ptr[a], route_ptr[a + 1]):
                    b = route_target[r]
                    moved = False
                    for ii in range(route_idx_ptr[r], route_idx_ptr[r + 1]):
                        c = route_idx_flat[ii]
                        veh = parts[c]
                        if veh > 0.0:
                            pending[b, c] += veh
                            moved = True
                    if moved:
                        has_pending[b] = True
            any_pending = False
            for a in range(A):
                if has_pending[a]:
                    any_pending = True
                    break
            if not any_pending:
                break
        # Safety net: anything still pending keeps its vehicles (it drains
        # in later steps); chains are bounded by path length so this
        # should not trigger.
        for a in range(A):
            if has_pending[a]:
                added = 0.0
                for c in range(NPi):
                    veh = pending[a, c]
                    if veh > 0.0:
                        contrib[a, j, c] += veh
                        added += veh
                        pending[a, c] = 0.0
                U[a, j + 1] += added
                has_pending[a] = False
        for a in range(A):
            V[a, j + 1] = V[a, j] + out_so_far[a]
    return exited


@njit(cache=True)
def _entry_value(U_row, t, dt, S):
    pos = t / dt
    if pos <= 0.0:
        return 0.0
    if pos >= S:
        return U_row[S]
    i0 = int(pos)
    return U_row[i0] + (pos - i0) * (U_row[i0 + 1] - U_row[i0])


@njit(cache=True)
def _exit_time(V_row, mass, entry_time, fftt, cap_step, dt, S):
    floor_time = entry_time + fftt
    if mass <= V_row[S]:
        idx = np.searchsorted(V_row, mass)
        if idx <= 0:
            return floor_time
        prev = V_row[idx - 1]
        t = (idx - 1 + (mass - prev) / (V_row[idx] - prev)) * dt
        return t if t > floor_time else floor_time
    rate = cap_step / dt
    if not np.isfinite(rate) or rate <= 0.0:
        t = S * dt
    else:
        t = S * dt + (mass - V_row[S]) / rate
    return t if t > floor_time else floor_time


@njit(cache=True)
def link_travel_times(U, V, fftt, cap_step, N, S, A, dt):
    """Per (link, entry interval) travel time at the cohort midpoint."""
    T = np.empty(N * A)
    for a in range(A):
        for h in range(N):
            inflow = U[a, h + 1] - U[a, h]
            t_entry = (h + 0.5) * dt
            if inflow > EPS_FLOW:
                mass = 0.5 * (U[a, h] + U[a, h + 1])
            else:
                mass = _entry_value(U[a], t_entry, dt, S)
            T[h * A + a] = (
                _exit_time(V[a], mass, t_entry, fftt[a], cap_step[a], dt, S) - t_entry
            )
    return T


@njit(cache=True)
def path_probes(
    U, V, fftt, cap_step, path_ptr, path_flat, F2d, N, S, A, Pi, dt,
    probe_rows, probe_cols,
):
    """Path travel times for all cohorts, chaining midpoint entry times.

    For cohorts with no flow the per-link entry intervals are recorded in
    ``probe_rows``/``probe_cols`` (their unit assignment-ratio column).
    Returns the path-time vector and the number of probe entries written.
    """
    C = np.empty(N * Pi)
    n_probe = 0
    for k in range(Pi):
        for h in range(N):
            t0 = (h + 0.5) * dt
            t = t0
            empty = F2d[h, k] <= 0.0
            for pi in range(path_ptr[k], path_ptr[k + 1]):
                a = path_flat[pi]
                if empty:
                    h_arr = int(t / dt)
                    if h_arr < N:
                        probe_rows[n_probe] = h_arr * A + a
                        probe_cols[n_probe] = h * Pi + k
                        n_probe += 1
                x = _entry_value(U[a], t, dt, S)
                t = _exit_time(V[a], x, t, fftt[a], cap_step[a], dt, S)
            C[h * Pi + k] = t - t0
    return C, n_probe
