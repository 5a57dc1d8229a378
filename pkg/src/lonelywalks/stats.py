"""Seeding and small-sample statistics helpers used by the replica drivers.

Sub-seeds are derived by strong hashing of (base seed, key...) through
numpy's SeedSequence so that replica streams are independent of scheduling
order and of the number of workers.
"""

import hashlib

import numpy as np

Z95 = 1.959963984540054


def _as_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & (2**64 - 1)
    digest = hashlib.sha256(str(part).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(base_seed: int, *key) -> np.random.SeedSequence:
    """SeedSequence for (base_seed, key...); key parts may be ints or strings."""
    return np.random.SeedSequence([_as_entropy(base_seed)] + [_as_entropy(k) for k in key])


def sub_rng(base_seed: int, *key) -> np.random.Generator:
    """Independent generator derived from (base_seed, key...)."""
    return np.random.default_rng(seed_sequence(base_seed, *key))


def sub_seed_int(base_seed: int, *key) -> int:
    """64-bit integer sub-seed (for RNGs that want a plain int)."""
    return int(seed_sequence(base_seed, *key).generate_state(1, np.uint64)[0])


def wilson_interval(successes: int, n: int, z: float = Z95):
    """Wilson score interval for a binomial proportion.

    Returns (estimate, low, high) where estimate is the raw proportion.
    """
    if n <= 0:
        raise ValueError("need n > 0")
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    return p, max(0.0, centre - half), min(1.0, centre + half)


def mean_se(samples) -> tuple[float, float]:
    """Sample mean and its standard error."""
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(n))


def mean_se_from_moments(s1: float, s2: float, n: int) -> tuple[float, float]:
    """Mean and standard error from accumulated sum and sum of squares."""
    if n < 2:
        raise ValueError("need at least two samples")
    mean = s1 / n
    var = max(0.0, (s2 - n * mean * mean) / (n - 1))
    return mean, float(np.sqrt(var / n))


def ratio_estimate(a, b) -> tuple[float, float]:
    """Delta-method mean and standard error for mean(a)/mean(b).

    a and b are paired per-replica samples; mean(b) must be bounded away
    from zero for the linearisation to make sense.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n = a.size
    if n != b.size or n < 2:
        raise ValueError("need paired samples, n >= 2")
    am, bm = a.mean(), b.mean()
    if bm <= 0:
        raise ValueError("denominator mean must be positive")
    r = am / bm
    # var(r) ~ (var(a) - 2 r cov(a,b) + r^2 var(b)) / (n bm^2)
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    cab = np.cov(a, b, ddof=1)[0, 1]
    var_r = (va - 2.0 * r * cab + r * r * vb) / (n * bm * bm)
    return float(r), float(np.sqrt(max(var_r, 0.0)))


def two_sample_z(m1: float, se1: float, m2: float, se2: float) -> float:
    """z-score of the difference m1 - m2 with independent standard errors."""
    denom = float(np.hypot(se1, se2))
    if denom == 0.0:
        return 0.0 if m1 == m2 else np.inf
    return (m1 - m2) / denom
