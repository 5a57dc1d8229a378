"""Compiled event loops for the occupancy simulators.

Gillespie direct-method cores over flat site indices, with Fenwick-tree
rate indexes so each event costs O(log n_sites).  The trees store
integer-valued weights (particle counts, branch-rule weights, loneliness
indicators) in float64, which keeps prefix sums exact.  Public wrappers
with validation live in particle_sim and sizebias.

Status codes returned by the loops: 0 ok, 1 explosion cap exceeded,
2 event-log capacity exceeded.
"""

import numpy as np
from numba import njit

RULE_LONELY = 0
RULE_LINEAR = 1
RULE_JSTAR = 2

EV_JUMP = 0
EV_BIRTH = 1
EV_DEATH = 2
EV_IMMIGRATE = 3
EV_SHIFT = 4

STATUS_OK = 0
STATUS_EXPLOSION = 1
STATUS_LOG_FULL = 2


@njit(cache=True, nogil=True, inline="always")
def _fw_update(tree, i, delta):
    # tree is 1-based, tree[0] unused
    j = i + 1
    while j < tree.shape[0]:
        tree[j] += delta
        j += j & (-j)


@njit(cache=True, nogil=True)
def _fw_build(values):
    n = values.shape[0]
    tree = np.zeros(n + 1)
    for i in range(n):
        if values[i] != 0.0:
            _fw_update(tree, i, values[i])
    return tree


@njit(cache=True, nogil=True, inline="always")
def _fw_find(tree, size, u):
    # largest index with prefix sum <= u; valid for 0 <= u < total
    pos = 0
    bitmask = 1
    while (bitmask << 1) <= size:
        bitmask <<= 1
    rem = u
    while bitmask:
        nxt = pos + bitmask
        if nxt <= size and tree[nxt] <= rem:
            pos = nxt
            rem -= tree[nxt]
        bitmask >>= 1
    return pos  # 0-based site index


@njit(cache=True, nogil=True, inline="always")
def _branch_weight(rule_id, k, jstar):
    if rule_id == RULE_LONELY:
        return 1.0 if k == 1 else 0.0
    if rule_id == RULE_LINEAR:
        return float(k)
    return 1.0 if k == jstar else 0.0


@njit(cache=True, nogil=True)
def run_eta(counts, rule_id, coef, jstar, jump_to, cumprob, snap_times, snaps,
            explosion_cap, rng, record, ev_time, ev_kind, ev_src, ev_dst):
    """Direct-method simulation of the occupancy process.

    counts is modified in place; snapshots are written to snaps (one row per
    entry of snap_times, which must be sorted and end at the horizon).
    Returns (status, n_events, final_time).
    """
    n_sites = counts.shape[0]
    n_snaps = snap_times.shape[0]
    n_off = cumprob.shape[0]

    walk_tree = _fw_build(counts.astype(np.float64))
    weights = np.empty(n_sites)
    wtot = 0.0
    for i in range(n_sites):
        weights[i] = _branch_weight(rule_id, counts[i], jstar)
        wtot += weights[i]
    branch_tree = _fw_build(weights)

    n_particles = 0
    for i in range(n_sites):
        n_particles += counts[i]

    t = 0.0
    si = 0
    while si < n_snaps and snap_times[si] <= t:
        for j in range(n_sites):
            snaps[si, j] = counts[j]
        si += 1

    n_events = 0
    ev_cap = ev_time.shape[0] if record else 0

    while si < n_snaps:
        total_rate = n_particles + coef * wtot
        if total_rate <= 0.0:
            while si < n_snaps:
                for j in range(n_sites):
                    snaps[si, j] = counts[j]
                si += 1
            break
        tn = t + rng.exponential(1.0 / total_rate)
        while si < n_snaps and snap_times[si] < tn:
            for j in range(n_sites):
                snaps[si, j] = counts[j]
            si += 1
        if si >= n_snaps:
            t = tn
            break
        t = tn

        u = rng.random() * total_rate
        if u < n_particles:
            src = _fw_find(walk_tree, n_sites, u)
            k = np.searchsorted(cumprob, rng.random() * cumprob[n_off - 1], side="right")
            dst = jump_to[src, k]
            if dst != src:
                counts[src] -= 1
                counts[dst] += 1
                _fw_update(walk_tree, src, -1.0)
                _fw_update(walk_tree, dst, 1.0)
                for s in (src, dst):
                    w = _branch_weight(rule_id, counts[s], jstar)
                    if w != weights[s]:
                        _fw_update(branch_tree, s, w - weights[s])
                        wtot += w - weights[s]
                        weights[s] = w
            kind = EV_JUMP
            esrc = src
            edst = dst
        else:
            key = (u - n_particles) / coef
            if key >= wtot:  # guard against division round-up at the edge
                key = wtot - 1e-9
            src = _fw_find(branch_tree, n_sites, key)
            if rng.random() < 0.5:
                counts[src] += 1
                _fw_update(walk_tree, src, 1.0)
                n_particles += 1
                kind = EV_BIRTH
            else:
                counts[src] -= 1
                _fw_update(walk_tree, src, -1.0)
                n_particles -= 1
                kind = EV_DEATH
            w = _branch_weight(rule_id, counts[src], jstar)
            if w != weights[src]:
                _fw_update(branch_tree, src, w - weights[src])
                wtot += w - weights[src]
                weights[src] = w
            esrc = src
            edst = -1
            if n_particles > explosion_cap:
                return STATUS_EXPLOSION, n_events, t

        if record:
            if n_events >= ev_cap:
                return STATUS_LOG_FULL, n_events, t
            ev_time[n_events] = t
            ev_kind[n_events] = kind
            ev_src[n_events] = esrc
            ev_dst[n_events] = edst
        n_events += 1

    return STATUS_OK, n_events, t


@njit(cache=True, nogil=True, inline="always")
def _flat_wrapped(coord_row, offset, sides, strides, d):
    idx = 0
    for j in range(d):
        idx += ((coord_row[j] + offset[j]) % sides[j]) * strides[j]
    return idx


@njit(cache=True, nogil=True)
def run_xi(counts, gamma, jump_to, cumprob, shift_offsets, shift_cumprob,
           coords, sides, strides, snap_times, snaps, explosion_cap, rng,
           record, ev_time, ev_kind, ev_src, ev_dst):
    """Immigration-source process: walks, lonely branching away from the
    origin, immigration at the empty origin, and source-jump shifts.

    counts is indexed internally; the accumulated source offset maps internal
    to external coordinates, and snapshots are materialised in external
    coordinates.  Returns (status, n_events, final_time).
    """
    n_sites = counts.shape[0]
    n_snaps = snap_times.shape[0]
    n_off = cumprob.shape[0]
    d = sides.shape[0]

    walk_tree = _fw_build(counts.astype(np.float64))
    lonely = np.empty(n_sites)
    lon_tot = 0.0
    for i in range(n_sites):
        lonely[i] = 1.0 if counts[i] == 1 else 0.0
        lon_tot += lonely[i]
    lonely_tree = _fw_build(lonely)

    n_particles = 0
    for i in range(n_sites):
        n_particles += counts[i]

    offset = np.zeros(d, dtype=np.int64)
    zero = np.zeros(d, dtype=np.int64)
    origin = _flat_wrapped(offset, zero, sides, strides, d)

    t = 0.0
    si = 0
    while si < n_snaps and snap_times[si] <= t:
        for z in range(n_sites):
            snaps[si, z] = counts[_flat_wrapped(coords[z], offset, sides, strides, d)]
        si += 1

    n_events = 0
    ev_cap = ev_time.shape[0] if record else 0

    while si < n_snaps:
        origin_lonely = lonely[origin]
        rate_branch = gamma * (lon_tot - origin_lonely)
        rate_imm = gamma if counts[origin] == 0 else 0.0
        total_rate = n_particles + rate_branch + rate_imm + 1.0  # shifts fire at rate 1
        tn = t + rng.exponential(1.0 / total_rate)
        while si < n_snaps and snap_times[si] < tn:
            for z in range(n_sites):
                snaps[si, z] = counts[_flat_wrapped(coords[z], offset, sides, strides, d)]
            si += 1
        if si >= n_snaps:
            t = tn
            break
        t = tn

        u = rng.random() * total_rate
        esrc = -1
        edst = -1
        if u < n_particles:
            src = _fw_find(walk_tree, n_sites, u)
            k = np.searchsorted(cumprob, rng.random() * cumprob[n_off - 1], side="right")
            dst = jump_to[src, k]
            if dst != src:
                counts[src] -= 1
                counts[dst] += 1
                _fw_update(walk_tree, src, -1.0)
                _fw_update(walk_tree, dst, 1.0)
                for s in (src, dst):
                    w = 1.0 if counts[s] == 1 else 0.0
                    if w != lonely[s]:
                        _fw_update(lonely_tree, s, w - lonely[s])
                        lon_tot += w - lonely[s]
                        lonely[s] = w
            kind = EV_JUMP
            esrc = src
            edst = dst
        elif u < n_particles + rate_branch:
            key = (u - n_particles) / gamma
            lon_eff = lon_tot - origin_lonely
            if key >= lon_eff:  # guard against division round-up at the edge
                key = lon_eff - 1e-9
            if origin_lonely != 0.0:
                _fw_update(lonely_tree, origin, -1.0)
            src = _fw_find(lonely_tree, n_sites, key)
            if origin_lonely != 0.0:
                _fw_update(lonely_tree, origin, 1.0)
            if rng.random() < 0.5:
                counts[src] += 1
                _fw_update(walk_tree, src, 1.0)
                n_particles += 1
                kind = EV_BIRTH
            else:
                counts[src] -= 1
                _fw_update(walk_tree, src, -1.0)
                n_particles -= 1
                kind = EV_DEATH
            w = 1.0 if counts[src] == 1 else 0.0
            if w != lonely[src]:
                _fw_update(lonely_tree, src, w - lonely[src])
                lon_tot += w - lonely[src]
                lonely[src] = w
            esrc = src
            if n_particles > explosion_cap:
                return STATUS_EXPLOSION, n_events, t
        elif u < n_particles + rate_branch + rate_imm:
            counts[origin] += 1
            _fw_update(walk_tree, origin, 1.0)
            n_particles += 1
            w = 1.0 if counts[origin] == 1 else 0.0
            if w != lonely[origin]:
                _fw_update(lonely_tree, origin, w - lonely[origin])
                lon_tot += w - lonely[origin]
                lonely[origin] = w
            kind = EV_IMMIGRATE
            esrc = origin
            if n_particles > explosion_cap:
                return STATUS_EXPLOSION, n_events, t
        else:
            k = np.searchsorted(shift_cumprob, rng.random() * shift_cumprob[shift_cumprob.shape[0] - 1],
                                side="right")
            for j in range(d):
                offset[j] += shift_offsets[k, j]
            origin = _flat_wrapped(offset, zero, sides, strides, d)
            kind = EV_SHIFT
            esrc = k

        if record:
            if n_events >= ev_cap:
                return STATUS_LOG_FULL, n_events, t
            ev_time[n_events] = t
            ev_kind[n_events] = kind
            ev_src[n_events] = esrc
            ev_dst[n_events] = edst
        n_events += 1

    return STATUS_OK, n_events, t
