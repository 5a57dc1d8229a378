"""Exact continuous-time simulation of the self-catalytic branching walks.

Particles jump independently at rate 1 with a given kernel; a site holding
k particles additionally fires a critical binary branching event (one
particle added or removed, equal odds) at rate b(k).  The lonely rule
b(k) = gamma * 1{k == 1} is the main object of study; the linear rule
b(k) = c * k reproduces independent branching walks and the j-star rule
b(k) = gamma * 1{k == j*} generalises loneliness to crowds of fixed size.

The heavy lifting happens in compiled event loops (_fastsim); this module
provides the validated public API, the reference single-step sampler, and
the replica driver for vacancy estimation.
"""

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import _fastsim
from .errors import ConfigurationError, ExplosionError
from .kernel import JumpKernel, TorusGeometry
from .stats import sub_rng, wilson_interval

DEFAULT_EXPLOSION_CAP = 10**7

KIND_NAMES = {
    _fastsim.EV_JUMP: "jump",
    _fastsim.EV_BIRTH: "birth",
    _fastsim.EV_DEATH: "death",
    _fastsim.EV_IMMIGRATE: "immigrate",
    _fastsim.EV_SHIFT: "shift",
}


@dataclass(frozen=True)
class BranchRule:
    """Branching rate function b with b(0) = 0 and named presets."""

    name: str
    b: Callable[[int], float]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.b(0) != 0.0:
            raise ConfigurationError("branch rule must satisfy b(0) = 0")

    @classmethod
    def lonely(cls, gamma: float) -> "BranchRule":
        if gamma < 0:
            raise ConfigurationError("gamma must be nonnegative")
        return cls("lonely", lambda k: gamma if k == 1 else 0.0, {"gamma": gamma})

    @classmethod
    def linear(cls, c: float) -> "BranchRule":
        if c < 0:
            raise ConfigurationError("c must be nonnegative")
        return cls("linear", lambda k: c * k, {"c": c})

    @classmethod
    def j_star(cls, gamma: float, j: int) -> "BranchRule":
        if gamma < 0 or j < 1:
            raise ConfigurationError("need gamma >= 0 and j >= 1")
        return cls("j-star", lambda k: gamma if k == j else 0.0, {"gamma": gamma, "j_star": j})

    def fast_encoding(self) -> tuple[int, float, int]:
        """(rule_id, coefficient, j_star) for the compiled loops."""
        if self.name == "lonely":
            return _fastsim.RULE_LONELY, self.params["gamma"], 1
        if self.name == "linear":
            return _fastsim.RULE_LINEAR, self.params["c"], 0
        if self.name == "j-star":
            return _fastsim.RULE_JSTAR, self.params["gamma"], self.params["j_star"]
        raise ConfigurationError(
            f"rule {self.name!r} has no compiled encoding; use a preset rule for simulation")


@dataclass(frozen=True)
class InitialLaw:
    """Product initial law: empty, k particles per site, or i.i.d. Poisson."""

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("empty", "deterministic", "poisson"):
            raise ConfigurationError(f"unknown initial law {self.kind!r}")
        if self.kind == "deterministic" and (self.value < 0 or self.value != int(self.value)):
            raise ConfigurationError("deterministic initial law needs integer k >= 0")
        if self.kind == "poisson" and self.value < 0:
            raise ConfigurationError("poisson initial law needs lambda >= 0")

    def sample_counts(self, geom: TorusGeometry, rng: np.random.Generator) -> np.ndarray:
        n = geom.n_sites
        if self.kind == "empty":
            return np.zeros(n, dtype=np.int64)
        if self.kind == "deterministic":
            return np.full(n, int(self.value), dtype=np.int64)
        return rng.poisson(self.value, size=n).astype(np.int64)

    def mean_intensity(self) -> float:
        return 0.0 if self.kind == "empty" else float(self.value)


class Occupancy:
    """Sparse site -> count configuration with cached branch rates."""

    def __init__(self, geometry: TorusGeometry, counts: dict | None = None,
                 rule: BranchRule | None = None):
        self.geometry = geometry
        self.counts: dict = {}
        for site, c in (counts or {}).items():
            c = int(c)
            if c < 0:
                raise ConfigurationError("counts must be nonnegative")
            if c > 0:
                self.counts[geometry.coerce(site)] = c
        self.total = sum(self.counts.values())
        self.rule = rule
        self._branch_cache: dict = {}
        self.branch_total = 0.0
        if rule is not None:
            self.attach_rule(rule)

    def attach_rule(self, rule: BranchRule) -> None:
        self.rule = rule
        self._branch_cache = {s: rule.b(c) for s, c in self.counts.items()}
        self._branch_cache = {s: b for s, b in self._branch_cache.items() if b > 0}
        self.branch_total = sum(self._branch_cache.values())

    def count(self, site) -> int:
        return self.counts.get(self.geometry.coerce(site), 0)

    def _set(self, site: tuple, c: int) -> None:
        old = self.counts.pop(site, 0)
        self.total += c - old
        if c > 0:
            self.counts[site] = c
        if self.rule is not None:
            old_b = self._branch_cache.pop(site, 0.0)
            new_b = self.rule.b(c)
            if new_b > 0:
                self._branch_cache[site] = new_b
            self.branch_total += new_b - old_b

    def move(self, src, dst) -> None:
        src = self.geometry.coerce(src)
        dst = self.geometry.coerce(dst)
        if self.counts.get(src, 0) <= 0:
            raise ValueError(f"no particle at {src}")
        if src == dst:
            return
        self._set(src, self.counts.get(src, 0) - 1)
        self._set(dst, self.counts.get(dst, 0) + 1)

    def add(self, site, delta: int = 1) -> None:
        site = self.geometry.coerce(site)
        c = self.counts.get(site, 0) + delta
        if c < 0:
            raise ValueError(f"count at {site} would become negative")
        self._set(site, c)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.geometry.n_sites, dtype=np.int64)
        for site, c in self.counts.items():
            out[self.geometry.flat(site)] = c
        return out

    @classmethod
    def from_dense(cls, geometry: TorusGeometry, dense: np.ndarray,
                   rule: BranchRule | None = None) -> "Occupancy":
        sites = geometry.all_sites()
        return cls(geometry, {sites[i]: int(c) for i, c in enumerate(dense) if c > 0}, rule)


def total_event_rate(occ: Occupancy, rule: BranchRule) -> float:
    """Total Gillespie rate: one walk unit per particle plus sum of b(counts)."""
    if occ.rule is not rule:
        occ.attach_rule(rule)
    return occ.total + occ.branch_total


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    site: tuple
    target: tuple | None = None


def step(occ: Occupancy, rule: BranchRule, kernel: JumpKernel,
         rng: np.random.Generator, now: float = 0.0) -> tuple[Event, float, Occupancy]:
    """Sample and apply one event; reference implementation over the sparse state.

    Returns (event, event time, occupancy).  The occupancy is updated in
    place.  Raises on an empty configuration (total rate zero).
    """
    rate = total_event_rate(occ, rule)
    if rate <= 0.0:
        raise ValueError("no active events: total rate is zero")
    t_next = now + rng.exponential(1.0 / rate)
    u = rng.random() * rate
    if u < occ.total:
        # uniform particle jumps by a kernel increment
        acc = 0.0
        for site, c in occ.counts.items():
            acc += c
            if u < acc:
                break
        k = np.searchsorted(np.cumsum(kernel.probs), rng.random(), side="right")
        dst = occ.geometry.wrap(np.asarray(site) + kernel.offsets[k])
        occ.move(site, dst)
        return Event(t_next, "jump", site, dst), t_next, occ
    u -= occ.total
    acc = 0.0
    for site, b in occ._branch_cache.items():
        acc += b
        if u < acc:
            break
    if rng.random() < 0.5:
        occ.add(site, 1)
        return Event(t_next, "birth", site), t_next, occ
    occ.add(site, -1)
    return Event(t_next, "death", site), t_next, occ


@dataclass
class EventLog:
    """Event history plus snapshots; replaying the events reproduces the snapshots."""

    geometry: TorusGeometry
    initial: np.ndarray
    times: np.ndarray
    kinds: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    snapshot_times: np.ndarray
    snapshots: np.ndarray

    def kind_names(self) -> list:
        return [KIND_NAMES[int(k)] for k in self.kinds]

    def replay(self) -> bool:
        """Re-apply events from the initial state and compare with snapshots."""
        counts = self.initial.copy()
        si = 0
        m = len(self.snapshot_times)
        for t, k, s, d in zip(self.times, self.kinds, self.src, self.dst):
            while si < m and self.snapshot_times[si] < t:
                if not np.array_equal(counts, self.snapshots[si]):
                    return False
                si += 1
            if k == _fastsim.EV_JUMP:
                if d != s:
                    counts[s] -= 1
                    counts[d] += 1
            elif k in (_fastsim.EV_BIRTH, _fastsim.EV_IMMIGRATE):
                counts[s] += 1
            elif k == _fastsim.EV_DEATH:
                counts[s] -= 1
            else:
                raise ValueError("replay only covers occupancy logs")
        while si < m:
            if not np.array_equal(counts, self.snapshots[si]):
                return False
            si += 1
        return True

    def save_snapshots_csv(self, path) -> None:
        """Rows (time, site, count), sites in flat order, zero counts skipped."""
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "site", "count"])
            for t, snap in zip(self.snapshot_times, self.snapshots):
                for z in np.nonzero(snap)[0]:
                    w.writerow([repr(float(t)), int(z), int(snap[z])])

    def save_binary(self, path) -> None:
        np.savez_compressed(path, sides=np.asarray(self.geometry.sides),
                            initial=self.initial, times=self.times, kinds=self.kinds,
                            src=self.src, dst=self.dst,
                            snapshot_times=self.snapshot_times, snapshots=self.snapshots)

    @classmethod
    def load_binary(cls, path) -> "EventLog":
        with np.load(path) as z:
            return cls(TorusGeometry(tuple(int(s) for s in z["sides"])),
                       z["initial"].copy(), z["times"].copy(), z["kinds"].copy(),
                       z["src"].copy(), z["dst"].copy(),
                       z["snapshot_times"].copy(), z["snapshots"].copy())


def jump_table(kernel: JumpKernel, geom: TorusGeometry) -> np.ndarray:
    """(n_sites, n_offsets) flat destination indices for every site and offset."""
    coords = geom.coords()
    n_off = kernel.offsets.shape[0]
    out = np.empty((geom.n_sites, n_off), dtype=np.int64)
    sides = np.asarray(geom.sides, dtype=np.int64)
    for k in range(n_off):
        shifted = (coords + kernel.offsets[k]) % sides
        out[:, k] = np.ravel_multi_index(shifted.T, geom.sides)
    return out


def _resolve_snapshots(snapshot_times) -> np.ndarray:
    st = np.asarray(snapshot_times, dtype=float)
    if st.size == 0 or np.any(st < 0) or np.any(np.diff(st) < 0):
        raise ConfigurationError("snapshot times must be nonnegative and sorted")
    return st


def _initial_counts(init, geom: TorusGeometry, rng: np.random.Generator) -> np.ndarray:
    if isinstance(init, Occupancy):
        if init.geometry.sides != geom.sides:
            raise ConfigurationError("occupancy geometry does not match")
        return init.dense()
    if isinstance(init, InitialLaw):
        return init.sample_counts(geom, rng)
    raise ConfigurationError("init must be an Occupancy or an InitialLaw")


def simulate_eta(init, rule: BranchRule, kernel: JumpKernel, geom: TorusGeometry,
                 snapshot_times, seed, record_events: bool = False,
                 explosion_cap: int = DEFAULT_EXPLOSION_CAP) -> EventLog:
    """Simulate the occupancy process and return snapshots (and optionally events).

    Deterministic given (init, seed). The last snapshot time is the horizon.
    """
    st = _resolve_snapshots(snapshot_times)
    seed_is_int = isinstance(seed, (int, np.integer))
    rule_id, coef, jstar = rule.fast_encoding()
    jt = jump_table(kernel, geom)
    cumprob = np.cumsum(kernel.probs)
    snaps = np.zeros((st.size, geom.n_sites), dtype=np.int64)

    rng = sub_rng(seed) if seed_is_int else seed
    counts = _initial_counts(init, geom, rng)
    initial = counts.copy()
    horizon = float(st[-1])
    ev_cap = 0
    if record_events:
        ev_cap = max(1024, int(4 * (initial.sum() + 1) * (1.0 + coef) * (horizon + 1)))
    while True:
        ev_time = np.empty(ev_cap)
        ev_kind = np.empty(ev_cap, dtype=np.int8)
        ev_src = np.empty(ev_cap, dtype=np.int64)
        ev_dst = np.empty(ev_cap, dtype=np.int64)
        status, n_events, _ = _fastsim.run_eta(
            counts, rule_id, float(coef), int(jstar), jt, cumprob, st, snaps,
            explosion_cap, rng, record_events, ev_time, ev_kind, ev_src, ev_dst)
        if status == _fastsim.STATUS_EXPLOSION:
            raise ExplosionError(
                f"particle count exceeded {explosion_cap}; rule={rule.name} {rule.params}")
        if status == _fastsim.STATUS_LOG_FULL:
            if not seed_is_int:
                raise ConfigurationError(
                    "event log overflowed; pass an integer seed so the run can restart")
            ev_cap *= 4
            rng = sub_rng(seed)
            counts = _initial_counts(init, geom, rng)
            continue
        break

    return EventLog(geom, initial, ev_time[:n_events], ev_kind[:n_events],
                    ev_src[:n_events], ev_dst[:n_events], st, snaps)


def estimate_vacancy(kernel: JumpKernel, geom: TorusGeometry, rule: BranchRule,
                     init: InitialLaw, x, times, replicas: int, seed,
                     explosion_cap: int = DEFAULT_EXPLOSION_CAP) -> list:
    """Estimate P(no particle at x) at each time over independent replicas.

    Returns one dict per time with the estimate and a 95% Wilson interval.
    Replica streams derive from (seed, replica index), so results do not
    depend on evaluation order.
    """
    if replicas < 100:
        raise ConfigurationError("need at least 100 replicas")
    st = _resolve_snapshots(times)
    xf = geom.flat(x)
    hits = np.zeros(st.size, dtype=np.int64)
    for r in range(replicas):
        log = simulate_eta(init, rule, kernel, geom, st, sub_rng(seed, r),
                           explosion_cap=explosion_cap)
        hits += log.snapshots[:, xf] == 0
    out = []
    for i, t in enumerate(st):
        est, lo, hi = wilson_interval(int(hits[i]), replicas)
        out.append({"time": float(t), "estimate": est, "ci_low": lo, "ci_high": hi,
                    "replicas": replicas})
    return out
