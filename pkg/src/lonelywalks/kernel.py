"""Jump kernels, torus geometry and random-walk transition machinery.

This module is the numerical substrate consumed by the simulators, the
moment solvers and the generator checks: finite-support jump kernels on Z^d
with an irreducibility test, periodic tori as finite truncations of the
lattice, transition-probability tables computed by Fourier inversion over
torus frequencies, return-probability integrals, jump rates of
endpoint-conditioned walks (bridges), and the transition field of the pair
of difference walks driven by three independent walkers.

Conventions
-----------
Sites are coordinate tuples; fields over the torus are ndarrays indexed by
wrapped coordinates, so ``field[geom.wrap(z)]`` is the mass at offset ``z``
from the walker's start.  By translation invariance the table stores only
``p(0, .)``; two-point values follow as ``p(a, b) = field[wrap(b - a)]``.
"""

import hashlib
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.integrate import simpson

from .errors import ConfigurationError, NumericalUnderflowError

_PROB_SUM_TOL = 1e-12
_CLIP_TOL = 1e-12
_NORM_TOL = 1e-9
_UNDERFLOW_FLOOR = 1e-290


def _int_det(m: np.ndarray) -> int:
    """Exact determinant of a small integer matrix (fraction-free Bareiss)."""
    a = [[int(v) for v in row] for row in m]
    n = len(a)
    sign = 1
    prev = 1
    for k in range(n - 1):
        if a[k][k] == 0:
            for i in range(k + 1, n):
                if a[i][k] != 0:
                    a[k], a[i] = a[i], a[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * a[-1][-1]


def _spans_full_lattice(offsets: np.ndarray) -> bool:
    """Whether the integer span of the offset rows is all of Z^d.

    True iff the gcd of all d x d minors of the offset matrix equals 1
    (rank condition included: fewer than d offsets cannot span).
    """
    n, d = offsets.shape
    if n < d:
        return False
    g = 0
    for rows in combinations(range(n), d):
        g = int(np.gcd(g, abs(_int_det(offsets[list(rows)]))))
        if g == 1:
            return True
    return False


@dataclass(frozen=True)
class JumpKernel:
    """Finite-support probability distribution of single-walk increments on Z^d.

    offsets : (n, d) integer array of distinct jump vectors
    probs   : (n,) strictly positive weights summing to one
    """

    offsets: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        offs = np.atleast_2d(np.asarray(self.offsets, dtype=np.int64))
        probs = np.asarray(self.probs, dtype=float)
        if offs.ndim != 2 or offs.shape[0] != probs.shape[0] or offs.shape[0] == 0:
            raise ConfigurationError("kernel needs matching, non-empty offsets and probs")
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "probs", probs)
        if np.any(probs <= 0.0):
            raise ConfigurationError("kernel probabilities must be strictly positive")
        if abs(probs.sum() - 1.0) > _PROB_SUM_TOL:
            raise ConfigurationError(f"kernel probabilities sum to {probs.sum()!r}, not 1")
        if len({tuple(o) for o in offs}) != offs.shape[0]:
            raise ConfigurationError("kernel offsets must be distinct")
        if not _spans_full_lattice(offs):
            raise ConfigurationError(
                "kernel is not irreducible: support offsets do not generate Z^d")

    @classmethod
    def from_dict(cls, support: dict) -> "JumpKernel":
        """Build from {offset: prob}; offsets may be ints (d=1) or tuples."""
        offs, probs = [], []
        for off, p in support.items():
            offs.append((off,) if isinstance(off, (int, np.integer)) else tuple(off))
            probs.append(float(p))
        return cls(np.asarray(offs, dtype=np.int64), np.asarray(probs))

    @property
    def dim(self) -> int:
        return self.offsets.shape[1]

    def support_dict(self) -> dict:
        return {tuple(o): float(p) for o, p in zip(self.offsets, self.probs)}

    @property
    def is_symmetric(self) -> bool:
        sup = self.support_dict()
        return all(abs(sup.get(tuple(-np.asarray(o)), 0.0) - p) < 1e-15
                   for o, p in sup.items())

    def max_offset(self) -> int:
        return int(np.abs(self.offsets).max())

    def coordinate_stds(self) -> np.ndarray:
        """Per-coordinate standard deviation of a single symmetrised jump."""
        sym = symmetrize(self)
        mean = sym.probs @ sym.offsets
        return np.sqrt(sym.probs @ (sym.offsets - mean) ** 2)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.offsets.tobytes())
        h.update(self.probs.tobytes())
        return h.hexdigest()[:16]


def simple_walk(d: int = 1) -> JumpKernel:
    """Nearest-neighbour symmetric walk: 1/(2d) to each of the 2d unit offsets."""
    offs = []
    for axis in range(d):
        for s in (1, -1):
            e = [0] * d
            e[axis] = s
            offs.append(tuple(e))
    return JumpKernel(np.asarray(offs, dtype=np.int64), np.full(2 * d, 1.0 / (2 * d)))


def symmetrize(kernel: JumpKernel) -> JumpKernel:
    """Symmetrised kernel: weight (p(x) + p(-x)) / 2, support closed under negation."""
    sup = kernel.support_dict()
    out: dict = {}
    for off, p in sup.items():
        neg = tuple(-c for c in off)
        out[off] = (p + sup.get(neg, 0.0)) / 2.0
        out.setdefault(neg, (sup.get(neg, 0.0) + p) / 2.0)
    offs = sorted(out)
    return JumpKernel(np.asarray(offs, dtype=np.int64),
                      np.asarray([out[o] for o in offs]))


@dataclass(frozen=True)
class TorusGeometry:
    """Periodic box Z^d / (L_1 Z x ... x L_d Z); each side must be >= 3."""

    sides: tuple

    def __post_init__(self):
        sides = tuple(int(s) for s in (self.sides if hasattr(self.sides, "__len__")
                                       else (self.sides,)))
        if any(s < 3 for s in sides):
            raise ConfigurationError("torus sides must all be >= 3")
        object.__setattr__(self, "sides", sides)

    @property
    def dim(self) -> int:
        return len(self.sides)

    @property
    def shape(self) -> tuple:
        return self.sides

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.sides))

    def wrap(self, v) -> tuple:
        v = np.atleast_1d(np.asarray(v, dtype=np.int64))
        return tuple(int(c % s) for c, s in zip(v, self.sides))

    def coerce(self, site) -> tuple:
        """Accept an int (d=1) or coordinate sequence and return a wrapped tuple."""
        if isinstance(site, (int, np.integer)):
            site = (site,)
        return self.wrap(site)

    def flat(self, site) -> int:
        return int(np.ravel_multi_index(self.coerce(site), self.sides))

    def coords(self) -> np.ndarray:
        """(n_sites, d) array of coordinates in flat (C) order."""
        grids = np.indices(self.sides).reshape(self.dim, -1)
        return grids.T.astype(np.int64)

    def all_sites(self):
        return [tuple(c) for c in self.coords()]


def wrapped_kernel_field(kernel: JumpKernel, geom: TorusGeometry) -> np.ndarray:
    """One-step jump distribution folded onto the torus."""
    if kernel.dim != geom.dim:
        raise ConfigurationError("kernel/geometry dimension mismatch")
    out = np.zeros(geom.shape)
    for off, p in zip(kernel.offsets, kernel.probs):
        out[geom.wrap(off)] += p
    return out


def _negate_field(f: np.ndarray) -> np.ndarray:
    """g with g[z] = f[-z mod L] on every axis."""
    g = np.flip(f)
    for ax in range(f.ndim):
        g = np.roll(g, 1, axis=ax)
    return g


def torus_convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cyclic convolution of two fields over the torus."""
    return np.fft.ifftn(np.fft.fftn(a) * np.fft.fftn(b)).real


def _clean_field(f: np.ndarray, what: str) -> np.ndarray:
    if f.min() < -_CLIP_TOL:
        raise ConfigurationError(f"{what}: negative mass {f.min():.3e} beyond round-off")
    f = np.clip(f, 0.0, None)
    if abs(f.sum() - 1.0) > _NORM_TOL:
        raise ConfigurationError(f"{what}: normalisation drift {f.sum() - 1.0:.3e}")
    return f


@dataclass
class TransitionTable:
    """Transition fields p(0, .)(t) of a continuous-time walk on the torus.

    Fields are stored on a time grid; `field_at` returns a stored field when
    the query time is on the grid and otherwise computes the exact field on
    demand from the cached kernel transform (no interpolation ever).
    """

    geometry: TorusGeometry
    kernel: JumpKernel
    rate: float
    times: np.ndarray
    fields: np.ndarray
    _khat: np.ndarray = field(repr=False, default=None)

    @property
    def is_symmetrized(self) -> bool:
        return self.kernel.is_symmetric

    def _compute(self, t: float) -> np.ndarray:
        raw = np.fft.ifftn(np.exp(self.rate * t * (self._khat - 1.0))).real
        f = _clean_field(raw, f"transition field t={t}")
        if self.is_symmetrized:
            f = 0.5 * (f + _negate_field(f))
        return f

    def field_at(self, t: float) -> np.ndarray:
        if t < 0:
            raise ValueError("time must be nonnegative")
        hits = np.nonzero(np.abs(self.times - t) <= 1e-10)[0]
        if hits.size:
            return self.fields[hits[0]]
        return self._compute(t)

    def prob(self, a, b, t: float) -> float:
        """p(a, b)(t) by translation invariance."""
        g = self.geometry
        av = np.asarray(g.coerce(a))
        bv = np.asarray(g.coerce(b))
        return float(self.field_at(t)[g.wrap(bv - av)])

    def return_probs(self) -> np.ndarray:
        """p(0,0)(t) along the grid."""
        origin = (0,) * self.geometry.dim
        return self.fields[(slice(None),) + origin]

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            sides=np.asarray(self.geometry.sides, dtype=np.int64),
            offsets=self.kernel.offsets,
            probs=self.kernel.probs,
            rate=np.asarray(self.rate),
            times=self.times,
            fields=self.fields,
        )

    @classmethod
    def load(cls, path) -> "TransitionTable":
        with np.load(path) as z:
            geom = TorusGeometry(tuple(int(s) for s in z["sides"]))
            kern = JumpKernel(z["offsets"], z["probs"])
            table = cls(geom, kern, float(z["rate"]), z["times"].copy(), z["fields"].copy())
        table._khat = np.fft.fftn(wrapped_kernel_field(kern, geom))
        return table


def transition_probs(kernel: JumpKernel, geom: TorusGeometry, rate: float,
                     times) -> TransitionTable:
    """Transition fields at the given times by Fourier inversion over torus frequencies.

    The walk jumps at the given rate with increments drawn from the kernel;
    the characteristic function exp(rate * t * (phi(k) - 1)) is inverted on
    the torus frequency grid.  Fields are clipped of negative round-off
    (anything below -1e-12 is an error) and checked to normalise within 1e-9.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ConfigurationError("empty time grid")
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ConfigurationError("times must be nonnegative and sorted")
    if rate <= 0:
        raise ConfigurationError("rate must be positive")
    khat = np.fft.fftn(wrapped_kernel_field(kernel, geom))
    table = TransitionTable(geom, kernel, float(rate), times,
                            np.empty((times.size,) + geom.shape))
    table._khat = khat
    for i, t in enumerate(times):
        table.fields[i] = table._compute(t)
    return table


def cached_transition_probs(kernel, geom, rate, times, cache_dir) -> TransitionTable:
    """transition_probs with an on-disk cache keyed by (kernel, geometry, rate, grid)."""
    import os

    times = np.asarray(times, dtype=float)
    h = hashlib.sha256()
    h.update(kernel.content_hash().encode())
    h.update(np.asarray(geom.sides, dtype=np.int64).tobytes())
    h.update(np.asarray(float(rate)).tobytes())
    h.update(times.tobytes())
    path = os.path.join(cache_dir, f"table_{h.hexdigest()[:24]}.npz")
    if os.path.exists(path):
        return TransitionTable.load(path)
    table = transition_probs(kernel, geom, rate, times)
    os.makedirs(cache_dir, exist_ok=True)
    table.save(path)
    return table


def green_integral(table: TransitionTable, t: float, dt: float) -> float:
    """Integral of the return probability p(0,0)(s) over [0, t].

    Composite Simpson quadrature on the stored grid.  The grid must contain
    both 0 and t and have spacing at most dt on [0, t].
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0
    if not table.is_symmetrized:
        raise ConfigurationError("green_integral needs a table built from a symmetrized kernel")
    times = table.times
    idx = np.nonzero(np.abs(times - t) <= 1e-10)[0]
    if not idx.size or abs(times[0]) > 1e-10:
        raise ConfigurationError("grid must contain 0 and t exactly")
    hi = int(idx[0])
    spacing = np.diff(times[: hi + 1])
    if spacing.max() > dt * (1 + 1e-12):
        raise ConfigurationError(
            f"grid too coarse: spacing {spacing.max():.4g} exceeds dt={dt:.4g}")
    returns = table.return_probs()[: hi + 1]
    return float(simpson(returns, x=times[: hi + 1]))


def bridge_rates(table: TransitionTable, kernel: JumpKernel, z, t: float,
                 T: float, x0) -> list:
    """Jump rates at time t of the walk conditioned to sit at x0 at time T.

    From site z the conditioned walk jumps to y = z + offset with rate
    p(offset) * p(y, x0)(T - t) / p(z, x0)(T - t).  Returns a list of
    (target site, rate) pairs over the kernel support.
    """
    if not 0.0 <= t < T:
        raise ValueError("need 0 <= t < T")
    g = table.geometry
    s = T - t
    f = table.field_at(s)
    zv = np.asarray(g.coerce(z))
    x0v = np.asarray(g.coerce(x0))
    denom = float(f[g.wrap(x0v - zv)])
    if denom < _UNDERFLOW_FLOOR:
        raise NumericalUnderflowError(
            f"p(z, x0)({s}) = {denom:.3e} underflowed; shrink the horizon or refine the table")
    out = []
    for off, p in zip(kernel.offsets, kernel.probs):
        y = g.wrap(zv + off)
        num = float(f[g.wrap(x0v - np.asarray(y))])
        out.append((y, float(p) * num / denom))
    return out


def pair_transition(kernel: JumpKernel, geom: TorusGeometry, t: float,
                    max_states: int = 4_000_000) -> np.ndarray:
    """Joint transition field of the two difference walks started at (0, 0).

    The pair (W, W') = (Y - Y0, Y' - Y0) of differences of three independent
    rate-1 walks with the given kernel; the joint characteristic function
    exp(t(phi(k)-1)) exp(t(phi(l)-1)) exp(t(phi(-k-l)-1)) is inverted over
    torus^2 frequencies.  Returns an array of shape geom.shape + geom.shape.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    n2 = geom.n_sites ** 2
    if n2 > max_states:
        raise ConfigurationError(
            f"pair field needs {n2} states, above the cap {max_states}")
    khat = np.fft.fftn(wrapped_kernel_field(kernel, geom))
    d = geom.dim
    shape = geom.shape
    a = np.exp(t * (khat - 1.0))
    a1 = a.reshape(shape + (1,) * d)
    a2 = a.reshape((1,) * d + shape)
    idx = np.indices(shape)
    m1 = [idx[j].reshape(shape + (1,) * d) for j in range(d)]
    m2 = [idx[j].reshape((1,) * d + shape) for j in range(d)]
    neg = tuple((-(m1[j] + m2[j])) % shape[j] for j in range(d))
    a3 = np.exp(t * (khat[neg] - 1.0))
    joint = np.fft.ifftn(a1 * a2 * a3).real
    joint = _clean_field(joint, f"pair field t={t}")
    # exchangeability of the two walkers
    swap = tuple(range(d, 2 * d)) + tuple(range(d))
    return 0.5 * (joint + joint.transpose(swap))


def pair_marginal(pair_field: np.ndarray, geom: TorusGeometry, which: int = 0) -> np.ndarray:
    """Marginal of one walker from a pair field."""
    axes = tuple(range(geom.dim, 2 * geom.dim)) if which == 0 else tuple(range(geom.dim))
    return pair_field.sum(axis=axes)


def pair_diagonal_sum(pair_field: np.ndarray, geom: TorusGeometry) -> float:
    """Total mass on the diagonal (both walkers at the same site)."""
    n = geom.n_sites
    flat = pair_field.reshape(n, n)
    return float(np.trace(flat))


def recommended_side(kernel: JumpKernel, horizon: float) -> int:
    """Rule-of-thumb torus side for a given horizon: 12 s sqrt(2T) + 2 max-offset.

    s is the largest per-coordinate standard deviation of a symmetrised
    jump.  Heuristic only; use `truncation_report` to measure the actual
    unwrapped tail mass.
    """
    sigma = float(kernel.coordinate_stds().max())
    return int(np.ceil(12.0 * sigma * np.sqrt(2.0 * horizon) + 2 * kernel.max_offset()))


def truncation_report(kernel: JumpKernel, rate: float, horizon: float,
                      side: int, factor: int = 4) -> dict:
    """Measure the displacement mass a torus of the given side would wrap.

    The walk is run on an embedding torus `factor` times larger and the mass
    outside the centred open box of half-width side/2 is reported.  This is a
    quality report, not a bound.
    """
    d = kernel.dim
    big = TorusGeometry((factor * side,) * d)
    f = transition_probs(kernel, big, rate, [horizon]).fields[0]
    half = side // 2
    inside = np.ones(big.shape, dtype=bool)
    for ax, L in enumerate(big.shape):
        c = np.arange(L)
        signed = np.where(c > L // 2, c - L, c)
        keep = np.abs(signed) < half
        sl = [None] * d
        sl[ax] = slice(None)
        inside &= keep[tuple(sl)]
    tail = float(f[~inside].sum())
    return {
        "side": side,
        "horizon": horizon,
        "rate": rate,
        "tail_mass": tail,
        "recommended_side": recommended_side(kernel, horizon),
    }
