"""Size-biased representation with a tagged bridge particle, and the
process viewed from the immigration source.

Two simulators live here.  `simulate_xitilde` runs the particle-level
representation of the size-biased law: the initial configuration gets the
Palm adjustment at the start site of a tagged particle, the tagged particle
follows a walk conditioned to reach the observation site at the horizon and
spawns (never dies) at the branching rate while alone, and everything else
follows the plain lonely dynamics.  `simulate_xi` runs the recentred
count-level process: free jumps, lonely branching away from the origin,
immigration at rate gamma while the origin is empty, and a recentring shift
whenever the source jumps.

`verify_sizebias_identity` is the Monte Carlo check that the tagged
representation reproduces the count-reweighted law, comparing bounded test
functionals between the two simulators.
"""

import math
import random
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from . import _fastsim
from .errors import ConfigurationError, ExplosionError, RejectionBudgetError
from .kernel import JumpKernel, TorusGeometry, TransitionTable, transition_probs
from .particle_sim import DEFAULT_EXPLOSION_CAP, InitialLaw, jump_table
from .stats import mean_se_from_moments, ratio_estimate, sub_rng, sub_seed_int, two_sample_z


@dataclass(frozen=True)
class BridgePath:
    """Piecewise-constant walk path pinned to `end` at time `horizon`."""

    geometry: TorusGeometry
    start: tuple
    end: tuple
    horizon: float
    jump_times: np.ndarray
    increments: np.ndarray  # (n_jumps, d)

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        if np.any(np.diff(jt) <= 0) or np.any(jt <= 0) or np.any(jt >= self.horizon):
            raise ConfigurationError("jump times must be strictly increasing in (0, T)")
        if self.position_at(self.horizon) != self.end:
            raise ConfigurationError("bridge path does not hit its endpoint")

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def position_at(self, t: float) -> tuple:
        k = int(np.searchsorted(self.jump_times, t, side="right"))
        pos = np.asarray(self.start, dtype=np.int64)
        if k:
            pos = pos + np.asarray(self.increments[:k]).sum(axis=0)
        return self.geometry.wrap(pos)


def sample_source_start(intensity, x, T: float, table: TransitionTable,
                        rng: np.random.Generator) -> tuple:
    """Sample the start site of the tagged particle: weight of site y is
    intensity(y) * p(y, x)(T).

    `intensity` is either a scalar (constant intensity; only constancy
    matters) or a per-site array over the torus.
    """
    geom = table.geometry
    x = geom.coerce(x)
    if T == 0.0:
        return x
    f = table.field_at(T)
    xv = np.asarray(x)
    if np.isscalar(intensity) or getattr(intensity, "ndim", 1) == 0:
        # start ~ x - (free-walk displacement over T)
        flatf = f.ravel()
        z_flat = int(np.searchsorted(np.cumsum(flatf), rng.random() * flatf.sum(),
                                     side="right"))
        z = np.unravel_index(z_flat, geom.shape)
        return geom.wrap(xv - np.asarray(z))
    lam = np.asarray(intensity, dtype=float).reshape(geom.shape)
    weights = np.empty(geom.n_sites)
    for i, y in enumerate(geom.coords()):
        weights[i] = lam[tuple(y)] * f[geom.wrap(xv - y)]
    total = weights.sum()
    if total <= 0:
        raise ConfigurationError("all start weights vanish")
    i = int(np.searchsorted(np.cumsum(weights), rng.random() * total, side="right"))
    return tuple(geom.coords()[i])


def _free_walk_path(kernel: JumpKernel, T: float, rng: np.random.Generator):
    """Jump times and increments of a rate-1 walk over [0, T]."""
    n = rng.poisson(T)
    times = np.sort(rng.uniform(0.0, T, size=n))
    cum = np.cumsum(kernel.probs)
    ks = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
    return times, kernel.offsets[ks]


def sample_bridge(kernel: JumpKernel, table: TransitionTable, y, x, T: float,
                  seed, try_budget: int = 10**6) -> BridgePath:
    """Exact bridge by rejection: run free rate-1 walks from y and accept the
    first path sitting at x at time T.  Expected tries 1 / p(y, x)(T)."""
    if T <= 0:
        raise ConfigurationError("bridge needs T > 0")
    geom = table.geometry
    y = geom.coerce(y)
    x = geom.coerce(x)
    rng = sub_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    yv = np.asarray(y, dtype=np.int64)
    xv = np.asarray(x, dtype=np.int64)
    sides = np.asarray(geom.sides, dtype=np.int64)
    for _ in range(try_budget):
        times, incs = _free_walk_path(kernel, T, rng)
        endpoint = (yv + incs.sum(axis=0)) % sides if len(times) else yv % sides
        if np.array_equal(endpoint, xv):
            return BridgePath(geom, y, x, T, times, incs)
    raise RejectionBudgetError(
        f"no accepted bridge in {try_budget} tries (p(y,x)(T) ~ "
        f"{table.prob(y, x, T):.3e}); use a larger torus or shorter horizon")


def sample_bridge_reversed(kernel: JumpKernel, geom: TorusGeometry, x, T: float,
                           rng: np.random.Generator) -> BridgePath:
    """Joint sample of (start, bridge) for constant intensity, without rejection.

    A free walk with the reversed kernel is run from x and read backwards in
    time: the reversed path ends at x, its start is distributed like
    p(., x)(T), and conditionally on the start it is the bridge.
    """
    if T <= 0:
        raise ConfigurationError("bridge needs T > 0")
    x = geom.coerce(x)
    rev = JumpKernel(-kernel.offsets, kernel.probs)
    times, incs = _free_walk_path(rev, T, rng)
    start = geom.wrap(np.asarray(x) + incs.sum(axis=0)) if len(times) else x
    # reversed in time: jumps at T - tau in reverse order, increments negated
    return BridgePath(geom, start, x, T, T - times[::-1], -incs[::-1])


def sample_bridge_grid(kernel: JumpKernel, table: TransitionTable, y, x, T: float,
                       seed, n_steps: int = 2000) -> BridgePath:
    """Cross-check sampler: inhomogeneous thinning of the conditioned rates on
    a fixed time grid.  Approximate (rates are frozen on each step and the
    last step is forced toward the endpoint); kept for validating the exact
    samplers, not for production draws."""
    from .kernel import bridge_rates

    geom = table.geometry
    rng = sub_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    y = geom.coerce(y)
    x = geom.coerce(x)
    h = T / n_steps
    while True:
        pos = y
        times, incs = [], []
        for i in range(n_steps - 1):
            t = i * h
            rates = bridge_rates(table, kernel, pos, t, T, x)
            total = sum(r for _, r in rates)
            if rng.random() < 1.0 - math.exp(-total * h):
                u = rng.random() * total
                acc = 0.0
                for tgt, r in rates:
                    acc += r
                    if u < acc:
                        break
                times.append(t + 0.5 * h)
                incs.append(np.asarray(tgt) - np.asarray(pos))
                pos = tgt
        if pos == x:
            return BridgePath(geom, y, x, T, np.asarray(times),
                              np.asarray(incs, dtype=np.int64).reshape(len(times), -1)
                              if times else np.zeros((0, geom.dim), dtype=np.int64))


@dataclass
class SelectedConfig:
    """Particle-level configuration with one tagged particle and kin marks."""

    geometry: TorusGeometry
    positions: np.ndarray   # flat site index per particle
    flags: np.ndarray       # kin-of-tagged marks (tagged itself is True)
    ids: np.ndarray
    selected_id: int
    site_counts: np.ndarray

    def selected_position(self) -> int:
        return int(self.positions[self.ids == self.selected_id][0])

    def validate(self) -> None:
        hist = np.bincount(self.positions, minlength=self.geometry.n_sites)
        if not np.array_equal(hist, self.site_counts):
            raise AssertionError("site-count index out of sync with particle list")
        if len(set(self.ids.tolist())) != len(self.ids):
            raise AssertionError("particle ids not unique")
        sel = self.ids == self.selected_id
        if sel.sum() != 1 or not self.flags[sel][0]:
            raise AssertionError("tagged particle missing or unmarked")

    def dense_counts(self) -> np.ndarray:
        return self.site_counts.copy()


@dataclass
class XiConfig:
    """Finite sparse configuration seen from the immigration source."""

    geometry: TorusGeometry
    counts: np.ndarray  # flat, int64

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def count(self, site) -> int:
        return int(self.counts[self.geometry.flat(site)])


@dataclass
class XiTrajectory:
    geometry: TorusGeometry
    times: np.ndarray
    counts: np.ndarray  # (n_times, n_sites)
    events: list | None = None

    def config(self, i: int) -> XiConfig:
        return XiConfig(self.geometry, self.counts[i].copy())


@dataclass
class XitildeLog:
    """Particle-level event records: (time, kind, particle id, aux).

    Kinds: 'jump' (aux: src, dst), 'bridge-jump' (aux: src, dst),
    'birth' (aux: parent id, child id, child flag), 'death' (aux: site).
    """

    events: list = field(default_factory=list)

    def deaths(self):
        return [e for e in self.events if e[1] == "death"]

    def births(self):
        return [e for e in self.events if e[1] == "birth"]


class _XitildeRunner:
    """Precomputed machinery for repeated tagged-particle simulations."""

    def __init__(self, kernel: JumpKernel, geom: TorusGeometry, gamma: float,
                 init: InitialLaw, x, T: float):
        if gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        if init.kind == "empty" or init.mean_intensity() == 0 and init.kind != "deterministic":
            if init.kind == "empty":
                raise ConfigurationError(
                    "size-biased run needs a nonvanishing initial intensity")
        if init.kind == "deterministic" and int(init.value) < 1:
            raise ConfigurationError("deterministic initial law needs k >= 1 here")
        self.kernel = kernel
        self.geom = geom
        self.gamma = gamma
        self.init = init
        self.x = geom.coerce(x)
        self.T = float(T)
        self.jt = jump_table(kernel, geom)
        self.cum = np.cumsum(kernel.probs)
        self.n_sites = geom.n_sites
        self.x_flat = geom.flat(self.x)

    def bridge(self, rng: np.random.Generator) -> BridgePath:
        return sample_bridge_reversed(self.kernel, self.geom, self.x, self.T, rng)

    def run(self, seed, record_events: bool = False):
        rng = sub_rng(seed) if isinstance(seed, (int, np.integer)) else seed
        bridge = self.bridge(rng)
        pyrand = random.Random(int(rng.integers(0, 2**63 - 1)))
        geom = self.geom
        n_sites = self.n_sites
        start_flat = geom.flat(bridge.start)

        counts = self.init.sample_counts(geom, rng)
        if self.init.kind == "poisson":
            counts[start_flat] += 1  # Palm of a Poisson law adds the tagged particle
        # non-tagged particle arrays
        pos: list = []
        pid: list = []
        flg: list = []
        occupants: dict = {}
        next_id = 1
        for site in range(n_sites):
            c = int(counts[site]) - (1 if site == start_flat else 0)
            for _ in range(c):
                occupants.setdefault(site, []).append(len(pos))
                pos.append(site)
                pid.append(next_id)
                flg.append(False)
                next_id += 1
        sel_pos = start_flat

        lonely_sites: list = []
        lonely_at: dict = {}
        for site in range(n_sites):
            if counts[site] == 1:
                lonely_at[site] = len(lonely_sites)
                lonely_sites.append(site)

        def change(site, delta):
            old = counts[site]
            new = old + delta
            counts[site] = new
            if old == 1:
                i = lonely_at.pop(site)
                last = lonely_sites.pop()
                if last != site:
                    lonely_sites[i] = last
                    lonely_at[last] = i
            if new == 1:
                lonely_at[site] = len(lonely_sites)
                lonely_sites.append(site)

        bridge_times = bridge.jump_times
        bridge_incs = bridge.increments
        # precompute flat targets of the tagged path
        bridge_targets = []
        p = np.asarray(bridge.start, dtype=np.int64)
        for inc in bridge_incs:
            p = p + inc
            bridge_targets.append(geom.flat(geom.wrap(p)))
        bj = 0

        log = XitildeLog() if record_events else None
        expo = pyrand.expovariate
        uni = pyrand.random
        gamma = self.gamma
        jt = self.jt
        cum = self.cum
        T = self.T
        t = 0.0

        while True:
            n_ns = len(pos)
            rate = n_ns + gamma * len(lonely_sites)
            t_ev = t + expo(rate) if rate > 0.0 else math.inf
            t_bridge = bridge_times[bj] if bj < len(bridge_times) else math.inf
            if t_ev >= T and t_bridge >= T:
                break
            if t_bridge <= t_ev:
                t = t_bridge
                dst = bridge_targets[bj]
                bj += 1
                if dst != sel_pos:
                    change(sel_pos, -1)
                    change(dst, +1)
                    if log is not None:
                        log.events.append((t, "bridge-jump", 0, sel_pos, dst))
                    sel_pos = dst
                continue
            t = t_ev
            u = uni() * rate
            if u < n_ns:
                i = int(u)
                src = pos[i]
                k = bisect_right(cum, uni() * cum[-1])
                dst = int(jt[src, k])
                if dst != src:
                    occupants[src].remove(i)
                    occupants.setdefault(dst, []).append(i)
                    pos[i] = dst
                    change(src, -1)
                    change(dst, +1)
                if log is not None:
                    log.events.append((t, "jump", pid[i], src, dst))
            else:
                v = (u - n_ns) / gamma
                site = lonely_sites[min(int(v), len(lonely_sites) - 1)]
                if site == sel_pos:
                    # lone tagged particle spawns kin; it never dies
                    occupants.setdefault(site, []).append(len(pos))
                    pos.append(site)
                    pid.append(next_id)
                    flg.append(True)
                    change(site, +1)
                    if log is not None:
                        log.events.append((t, "birth", 0, next_id, True))
                    next_id += 1
                else:
                    i = occupants[site][0]
                    if uni() < 0.5:
                        occupants.setdefault(site, []).append(len(pos))
                        pos.append(site)
                        pid.append(next_id)
                        flg.append(flg[i])
                        change(site, +1)
                        if log is not None:
                            log.events.append((t, "birth", pid[i], next_id, flg[i]))
                        next_id += 1
                    else:
                        occupants[site].remove(i)
                        last = len(pos) - 1
                        if i != last:
                            moved_site = pos[last]
                            occ = occupants[moved_site]
                            occ[occ.index(last)] = i
                            pos[i] = pos[last]
                            pid[i] = pid[last]
                            flg[i] = flg[last]
                        dead = pid[last] if i == last else None
                        if log is not None:
                            log.events.append((t, "death", pid[last] if i == last else dead, site))
                        pos.pop()
                        pid.pop()
                        flg.pop()
                        change(site, -1)

        positions = np.asarray(pos + [sel_pos], dtype=np.int64)
        ids = np.asarray(pid + [0], dtype=np.int64)
        flags = np.asarray(flg + [True], dtype=bool)
        cfg = SelectedConfig(geom, positions, flags, ids, 0, counts.copy())
        return cfg, bridge, log


def simulate_xitilde(kernel: JumpKernel, geom: TorusGeometry, gamma: float,
                     init: InitialLaw, x, T: float, seed,
                     record_events: bool = False):
    """One tagged-particle run; returns (SelectedConfig at T, BridgePath, log).

    The log is None unless record_events is set.
    """
    runner = _XitildeRunner(kernel, geom, gamma, init, x, T)
    return runner.run(seed, record_events=record_events)


def extract_relatives(cfg: SelectedConfig, path: BridgePath) -> XiConfig:
    """Kin of the tagged particle, minus the tagged particle itself,
    recentred so the tagged endpoint sits at the origin."""
    geom = cfg.geometry
    end = np.asarray(geom.coerce(path.end), dtype=np.int64)
    mask = cfg.flags & (cfg.ids != cfg.selected_id)
    counts = np.zeros(geom.n_sites, dtype=np.int64)
    coords = geom.coords()
    for p in cfg.positions[mask]:
        counts[geom.flat(coords[p] - end)] += 1
    return XiConfig(geom, counts)


def recentred_minus_source(cfg: SelectedConfig, path: BridgePath) -> XiConfig:
    """The full configuration recentred at the tagged endpoint, with the
    tagged particle removed (one unit off the origin)."""
    geom = cfg.geometry
    end = np.asarray(geom.coerce(path.end), dtype=np.int64)
    counts = np.zeros(geom.n_sites, dtype=np.int64)
    coords = geom.coords()
    for p in cfg.positions:
        counts[geom.flat(coords[p] - end)] += 1
    origin = geom.flat((0,) * geom.dim)
    counts[origin] -= 1
    if counts[origin] < 0:
        raise AssertionError("tagged particle not at its endpoint")
    return XiConfig(geom, counts)


class _XiRunner:
    """Precomputed machinery for repeated immigration-source simulations."""

    def __init__(self, kernel: JumpKernel, geom: TorusGeometry, gamma: float,
                 snapshot_times, explosion_cap: int = DEFAULT_EXPLOSION_CAP):
        if gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        self.kernel = kernel
        self.geom = geom
        self.gamma = float(gamma)
        self.times = np.asarray(snapshot_times, dtype=float)
        if self.times.size == 0 or np.any(self.times < 0) or np.any(np.diff(self.times) < 0):
            raise ConfigurationError("snapshot times must be nonnegative and sorted")
        self.jt = jump_table(kernel, geom)
        self.cum = np.cumsum(kernel.probs)
        self.shift_offsets = kernel.offsets.astype(np.int64)
        self.shift_cum = np.cumsum(kernel.probs)
        self.coords = geom.coords()
        self.sides = np.asarray(geom.sides, dtype=np.int64)
        strides = np.ones(geom.dim, dtype=np.int64)
        for j in range(geom.dim - 2, -1, -1):
            strides[j] = strides[j + 1] * self.sides[j + 1]
        self.strides = strides
        self.explosion_cap = explosion_cap
        self.snaps = np.zeros((self.times.size, geom.n_sites), dtype=np.int64)
        self._empty_ev = (np.empty(0), np.empty(0, dtype=np.int8),
                          np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))

    def run(self, rng: np.random.Generator, init_counts: np.ndarray | None = None,
            record_events: bool = False, ev_cap: int = 100_000):
        counts = (np.zeros(self.geom.n_sites, dtype=np.int64) if init_counts is None
                  else init_counts.astype(np.int64).copy())
        if record_events:
            ev = (np.empty(ev_cap), np.empty(ev_cap, dtype=np.int8),
                  np.empty(ev_cap, dtype=np.int64), np.empty(ev_cap, dtype=np.int64))
        else:
            ev = self._empty_ev
        status, n_events, _ = _fastsim.run_xi(
            counts, self.gamma, self.jt, self.cum, self.shift_offsets,
            self.shift_cum, self.coords, self.sides, self.strides, self.times,
            self.snaps, self.explosion_cap, rng, record_events, *ev)
        if status == _fastsim.STATUS_EXPLOSION:
            raise ExplosionError(f"immigration-source run exceeded {self.explosion_cap}")
        if status == _fastsim.STATUS_LOG_FULL:
            raise ConfigurationError("event log capacity exceeded; raise ev_cap")
        events = None
        if record_events:
            events = [(float(ev[0][i]), int(ev[1][i]), int(ev[2][i]), int(ev[3][i]))
                      for i in range(n_events)]
        return self.snaps, events


def simulate_xi(kernel: JumpKernel, geom: TorusGeometry, gamma: float,
                snapshot_times, seed, init=None, record_events: bool = False,
                explosion_cap: int = DEFAULT_EXPLOSION_CAP) -> XiTrajectory:
    """Trajectory of the immigration-source process, from the empty
    configuration by default (pass `init` to start elsewhere)."""
    runner = _XiRunner(kernel, geom, gamma, snapshot_times, explosion_cap)
    rng = sub_rng(seed) if isinstance(seed, (int, np.integer)) else seed
    if isinstance(init, InitialLaw):
        init = init.sample_counts(geom, rng)
    snaps, events = runner.run(rng, init, record_events=record_events)
    return XiTrajectory(geom, runner.times, snaps.copy(), events)


@dataclass
class XiStatistics:
    """Replica-averaged observables of the immigration-source process."""

    times: np.ndarray
    replicas: int
    vac0: np.ndarray            # P(no particle at the origin)
    mean0: np.ndarray           # E[count at origin]
    mean0_se: np.ndarray
    second0: np.ndarray         # E[count^2 at origin]
    second0_se: np.ndarray
    min_capped: dict            # K -> (replicas, n_times) capped counts
    half_m1_hits: np.ndarray | None = None
    lonely: np.ndarray | None = None    # (n_times, n_sites) P(count == 1)
    cross: np.ndarray | None = None     # (n_times, n_sites) E[1{origin empty} count]
    vac_cov: np.ndarray | None = None   # (n_times, n_times) covariance of vacancy
    origin_samples: np.ndarray | None = None  # (replicas, n_times) raw origin counts


def collect_xi_statistics(kernel: JumpKernel, geom: TorusGeometry, gamma: float,
                          times, replicas: int, seed, caps=(1, 5),
                          collect_site_signals: bool = False,
                          collect_cov: bool = False,
                          keep_origin_samples: bool = False,
                          init=None) -> XiStatistics:
    """Run replicas of the immigration-source process and average observables.

    Replica r uses the generator derived from (seed, 'xi', r); the reduction
    is a plain sum, so results do not depend on evaluation order.
    """
    times = np.asarray(times, dtype=float)
    runner = _XiRunner(kernel, geom, gamma, times)
    m = times.size
    vac_hits = np.zeros(m)
    s1 = np.zeros(m)
    s2 = np.zeros(m)
    s4 = np.zeros(m)
    minc = {K: np.zeros((replicas, m), dtype=np.int16) for K in caps}
    lonely = np.zeros((m, geom.n_sites)) if collect_site_signals else None
    cross = np.zeros((m, geom.n_sites)) if collect_site_signals else None
    vc = np.zeros((m, m)) if collect_cov else None
    origin_samples = np.zeros((replicas, m), dtype=np.int32) if keep_origin_samples else None

    init_counts = None
    init_law = init if isinstance(init, InitialLaw) else None
    if init is not None and not isinstance(init, InitialLaw):
        init_counts = np.asarray(init, dtype=np.int64)

    for r in range(replicas):
        rng = sub_rng(seed, "xi", r)
        if init_law is not None:
            init_counts = init_law.sample_counts(geom, rng)
        snaps, _ = runner.run(rng, init_counts)
        at0 = snaps[:, 0].astype(float)
        vac = at0 == 0
        vac_hits += vac
        s1 += at0
        s2 += at0 * at0
        s4 += at0 ** 4
        for K in caps:
            minc[K][r] = np.minimum(snaps[:, 0], K)
        if collect_site_signals:
            lonely += snaps == 1
            cross += vac[:, None] * snaps
        if collect_cov:
            vc += np.outer(vac, vac)
        if keep_origin_samples:
            origin_samples[r] = snaps[:, 0]

    n = replicas
    mean0 = s1 / n
    var0 = np.maximum(0.0, (s2 - n * mean0**2) / (n - 1))
    second0 = s2 / n
    var_sq = np.maximum(0.0, (s4 - n * second0**2) / (n - 1))
    stats = XiStatistics(
        times=times, replicas=n, vac0=vac_hits / n,
        mean0=mean0, mean0_se=np.sqrt(var0 / n),
        second0=second0, second0_se=np.sqrt(var_sq / n),
        min_capped=minc,
        lonely=None if lonely is None else lonely / n,
        cross=None if cross is None else cross / n,
        origin_samples=origin_samples,
    )
    if collect_cov:
        stats.vac_cov = (vc - n * np.outer(stats.vac0, stats.vac0)) / (n - 1)
    return stats


# ---------------------------------------------------------------------------
# test functionals and the size-bias identity check


def fn_count_at(geom: TorusGeometry, site, k: int):
    i = geom.flat(site)
    return (f"count@{geom.coerce(site)}=={k}",
            lambda counts: 1.0 if counts[i] == k else 0.0)


def fn_count_at_least(geom: TorusGeometry, site, k: int):
    i = geom.flat(site)
    return (f"count@{geom.coerce(site)}>={k}",
            lambda counts: 1.0 if counts[i] >= k else 0.0)


def fn_vacant(geom: TorusGeometry, site):
    i = geom.flat(site)
    return (f"vacant@{geom.coerce(site)}",
            lambda counts: 1.0 if counts[i] == 0 else 0.0)


def fn_total_at_least(m: int):
    return (f"total>={m}", lambda counts: 1.0 if counts.sum() >= m else 0.0)


def fn_window_at_least(geom: TorusGeometry, centre, radius: int, m: int):
    centre = np.asarray(geom.coerce(centre))
    idx = [geom.flat(centre + off) for off in
           np.ndindex(*(2 * radius + 1,) * geom.dim)
           for off in [np.asarray(off) - radius]]
    idx = np.unique(idx)
    return (f"window(r={radius})>={m}",
            lambda counts: 1.0 if counts[idx].sum() >= m else 0.0)


def default_test_functions(geom: TorusGeometry, x) -> list:
    xv = np.asarray(geom.coerce(x))
    return [
        fn_count_at(geom, x, 1),
        fn_count_at(geom, x, 2),
        fn_count_at(geom, x, 3),
        fn_count_at_least(geom, x, 4),
        fn_vacant(geom, xv + 1),
        fn_vacant(geom, xv + geom.sides[0] // 2),
        fn_total_at_least(int(geom.n_sites * 0.5)),
        fn_window_at_least(geom, x, 2, 3),
    ]


def verify_sizebias_identity(kernel: JumpKernel, geom: TorusGeometry, gamma: float,
                             init: InitialLaw, x, T: float, test_fns, replicas: int,
                             seed) -> list:
    """Monte Carlo check of the tagged-representation identity.

    Side A averages f over tagged-particle runs; side B forms the
    count-reweighted ratio E[count_x(T) f] / E[count_x(T)] over plain runs
    with matched parameters.  Returns one report row per test function with
    both estimates, their 95% intervals, and the comparison z-score.
    """
    from .particle_sim import BranchRule, simulate_eta

    if not test_fns:
        raise ConfigurationError("need at least one test function")
    names = [n for n, _ in test_fns]
    fns = [f for _, f in test_fns]
    nf = len(fns)
    x_flat = geom.flat(x)

    runner = _XitildeRunner(kernel, geom, gamma, init, x, T)
    a_sum = np.zeros(nf)
    a_sumsq = np.zeros(nf)
    for r in range(replicas):
        cfg, _, _ = runner.run(sub_rng(seed, "tagged", r))
        counts = cfg.site_counts
        for i, f in enumerate(fns):
            v = f(counts)
            a_sum[i] += v
            a_sumsq[i] += v * v

    rule = BranchRule.lonely(gamma)
    w = np.empty(replicas)
    af = np.empty((nf, replicas))
    for r in range(replicas):
        log = simulate_eta(init, rule, kernel, geom, [T], sub_rng(seed, "plain", r))
        counts = log.snapshots[-1]
        w[r] = counts[x_flat]
        for i, f in enumerate(fns):
            af[i, r] = w[r] * f(counts)

    rows = []
    for i in range(nf):
        a_mean, a_se = mean_se_from_moments(a_sum[i], a_sumsq[i], replicas)
        b_mean, b_se = ratio_estimate(af[i], w)
        z = two_sample_z(a_mean, a_se, b_mean, b_se)
        rows.append({
            "test_fn": names[i],
            "side_a": a_mean, "side_a_lo": a_mean - 1.96 * a_se,
            "side_a_hi": a_mean + 1.96 * a_se,
            "side_b": b_mean, "side_b_lo": b_mean - 1.96 * b_se,
            "side_b_hi": b_mean + 1.96 * b_se,
            "z": z, "replicas": replicas,
        })
    return rows


def sizebias_report_csv(rows: list, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["testFn", "sideA", "sideA_CI", "sideB", "sideB_CI", "z"])
        for r in rows:
            w.writerow([r["test_fn"], repr(r["side_a"]),
                        f"[{r['side_a_lo']:.6g},{r['side_a_hi']:.6g}]",
                        repr(r["side_b"]),
                        f"[{r['side_b_lo']:.6g},{r['side_b_hi']:.6g}]",
                        repr(r["z"])])


def domination_check(kernel: JumpKernel, geom: TorusGeometry, gamma: float,
                     init: InitialLaw, x, T: float, replicas: int, seed) -> dict:
    """Pathwise and distributional checks around the kin-subset picture.

    Pathwise (exact, every replica): kin-minus-tagged never exceeds the
    recentred full configuration minus the tagged particle.

    Distributional: origin mean and vacancy of (a) the kin subset against
    the empty-start source process, and (b) the recentred full configuration
    minus the tagged particle against the source process started from the
    matching product law.  (b) is the exact identification; (a) is reported
    with its z-scores for reference.
    """
    runner = _XitildeRunner(kernel, geom, gamma, init, x, T)
    n = replicas
    rel_mean = np.empty(n)
    rel_vac = np.empty(n)
    full_mean = np.empty(n)
    full_vac = np.empty(n)
    dominated = True
    for r in range(n):
        cfg, path, _ = runner.run(sub_rng(seed, "tagged", r))
        rel = extract_relatives(cfg, path)
        full = recentred_minus_source(cfg, path)
        if np.any(rel.counts > full.counts):
            dominated = False
        rel_mean[r] = rel.counts[0]
        rel_vac[r] = 1.0 if rel.counts[0] == 0 else 0.0
        full_mean[r] = full.counts[0]
        full_vac[r] = 1.0 if full.counts[0] == 0 else 0.0

    xi_empty = collect_xi_statistics(kernel, geom, gamma, [T], n, sub_seed_int(seed, "xi-empty"))
    xi_matched = collect_xi_statistics(kernel, geom, gamma, [T], n,
                                       sub_seed_int(seed, "xi-matched"), init=init)

    def _summary(vals):
        m = vals.mean()
        se = vals.std(ddof=1) / math.sqrt(n)
        return m, se

    out = {"pathwise_dominated": dominated, "replicas": n}
    for label, mean_arr, vac_arr, xi in (
            ("kin_vs_empty_start", rel_mean, rel_vac, xi_empty),
            ("full_vs_matched_start", full_mean, full_vac, xi_matched)):
        m, mse = _summary(mean_arr)
        v, vse = _summary(vac_arr)
        xm, xmse = xi.mean0[0], xi.mean0_se[0]
        xv = xi.vac0[0]
        xvse = math.sqrt(max(xv * (1 - xv), 1e-12) / n)
        out[label] = {
            "mean": m, "mean_se": mse, "xi_mean": float(xm), "xi_mean_se": float(xmse),
            "vacancy": v, "vacancy_se": vse, "xi_vacancy": float(xv),
            "xi_vacancy_se": xvse,
            "z_mean": two_sample_z(m, mse, float(xm), float(xmse)),
            "z_vacancy": two_sample_z(v, vse, float(xv), xvse),
        }
    return out
