import numpy as np
import pytest

from lonelywalks.errors import ConfigurationError, NumericalUnderflowError
from lonelywalks.kernel import (
    JumpKernel,
    TorusGeometry,
    TransitionTable,
    bridge_rates,
    cached_transition_probs,
    green_integral,
    pair_diagonal_sum,
    pair_marginal,
    pair_transition,
    recommended_side,
    simple_walk,
    symmetrize,
    torus_convolve,
    transition_probs,
    truncation_report,
    wrapped_kernel_field,
)

ASYM1 = JumpKernel.from_dict({1: 0.7, -1: 0.3})


def uniformization_field(kernel, geom, rate, t, tail=1e-12):
    """Poisson mixture of discrete kernel powers, built with explicit rolls."""
    step = wrapped_kernel_field(kernel, geom)

    def convolve_step(f):
        out = np.zeros_like(f)
        for off, p in zip(kernel.offsets, kernel.probs):
            out += p * np.roll(f, shift=tuple(off), axis=tuple(range(geom.dim)))
        return out

    lam = rate * t
    field = np.zeros(geom.shape)
    power = np.zeros(geom.shape)
    power[(0,) * geom.dim] = 1.0
    weight = np.exp(-lam)
    n = 0
    accumulated = 0.0
    while accumulated < 1.0 - tail:
        field += weight * power
        accumulated += weight
        n += 1
        weight *= lam / n
        power = convolve_step(power)
        if n > 10_000:
            raise RuntimeError("uniformization did not converge")
    return field


class TestJumpKernel:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            JumpKernel.from_dict({1: 0.5, -1: 0.4})  # sums to 0.9
        with pytest.raises(ConfigurationError):
            JumpKernel.from_dict({1: 1.5, -1: -0.5})  # negative weight
        with pytest.raises(ConfigurationError):
            JumpKernel.from_dict({2: 0.5, -2: 0.5})  # generates 2Z only
        with pytest.raises(ConfigurationError):
            JumpKernel.from_dict({(2, 0): 0.5, (0, 1): 0.5})  # gcd of minors is 2
        JumpKernel.from_dict({(2, 0): 0.4, (0, 1): 0.3, (1, 0): 0.3})  # fine

    def test_symmetrize_already_symmetric(self):
        k = simple_walk(1)
        assert symmetrize(k).support_dict() == k.support_dict()

    def test_symmetrize_one_way(self):
        k = JumpKernel.from_dict({1: 1.0})
        assert symmetrize(k).support_dict() == {(1,): 0.5, (-1,): 0.5}

    def test_symmetrize_2d(self):
        k = JumpKernel.from_dict({(1, 0): 0.7, (0, 1): 0.3})
        expect = {(1, 0): 0.35, (-1, 0): 0.35, (0, 1): 0.15, (0, -1): 0.15}
        got = symmetrize(k).support_dict()
        assert set(got) == set(expect)
        for off, p in expect.items():
            assert got[off] == pytest.approx(p, abs=1e-15)

    def test_symmetrize_closed_under_negation(self):
        got = symmetrize(ASYM1).support_dict()
        assert got == {(1,): 0.5, (-1,): 0.5}
        assert abs(sum(got.values()) - 1.0) < 1e-12


class TestGeometry:
    def test_sides_validation(self):
        with pytest.raises(ConfigurationError):
            TorusGeometry((2,))
        assert TorusGeometry(5).sides == (5,)

    def test_wrap_homomorphism(self):
        g = TorusGeometry((5, 7))
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.integers(-20, 20, size=2)
            b = rng.integers(-20, 20, size=2)
            direct = g.wrap(a + b)
            nested = g.wrap(np.asarray(g.wrap(a)) + np.asarray(g.wrap(b)))
            assert direct == nested

    def test_flat_roundtrip(self):
        g = TorusGeometry((4, 6))
        for i, site in enumerate(g.all_sites()):
            assert g.flat(site) == i


class TestTransitionProbs:
    def test_time_zero_is_point_mass(self):
        g = TorusGeometry(16)
        tab = transition_probs(simple_walk(1), g, 1.0, [0.0, 0.5])
        f0 = tab.fields[0]
        assert f0[0] == pytest.approx(1.0, abs=1e-12)
        assert f0[1:].max() < 1e-12

    def test_empty_times_rejected(self):
        with pytest.raises(ConfigurationError):
            transition_probs(simple_walk(1), TorusGeometry(8), 1.0, [])

    def test_uniformization_oracle(self):
        g = TorusGeometry(64)
        tab = transition_probs(simple_walk(1), g, 2.0, [1.0])
        oracle = uniformization_field(simple_walk(1), g, 2.0, 1.0)
        tv = 0.5 * np.abs(tab.fields[0] - oracle).sum()
        assert tv <= 1e-8

    def test_uniformization_oracle_asymmetric_2d(self):
        k = JumpKernel.from_dict({(1, 0): 0.5, (0, 1): 0.3, (-1, -1): 0.2})
        g = TorusGeometry((12, 10))
        tab = transition_probs(k, g, 1.5, [0.8])
        oracle = uniformization_field(k, g, 1.5, 0.8)
        tv = 0.5 * np.abs(tab.fields[0] - oracle).sum()
        assert tv <= 1e-8

    def test_symmetric_monotonicity_and_domination(self):
        # return probability nonincreasing, and dominated by it everywhere
        g = TorusGeometry(32)
        tab = transition_probs(symmetrize(ASYM1), g, 2.0, np.linspace(0.0, 5.0, 41))
        p0 = tab.return_probs()
        assert np.all(np.diff(p0) <= 1e-14)
        for i in range(len(tab.times)):
            assert tab.fields[i].max() <= p0[i] + 1e-14

    def test_symmetric_fields_exactly_even(self):
        g = TorusGeometry(16)
        tab = transition_probs(simple_walk(1), g, 1.0, [0.7])
        f = tab.fields[0]
        flipped = np.roll(f[::-1], 1)
        assert np.array_equal(f, flipped)

    def test_chapman_kolmogorov(self):
        g = TorusGeometry(24)
        tab = transition_probs(ASYM1, g, 1.0, [0.6, 0.9, 1.5])
        conv = torus_convolve(tab.fields[0], tab.fields[1])
        tv = 0.5 * np.abs(conv - tab.fields[2]).sum()
        assert tv <= 1e-8

    def test_field_at_off_grid_matches_chapman(self):
        g = TorusGeometry(16)
        tab = transition_probs(simple_walk(1), g, 1.0, [0.0, 1.0])
        half = tab.field_at(0.5)
        tv = 0.5 * np.abs(torus_convolve(half, half) - tab.fields[1]).sum()
        assert tv <= 1e-10

    def test_save_load_roundtrip(self, tmp_path):
        g = TorusGeometry(8)
        tab = transition_probs(ASYM1, g, 1.0, [0.0, 0.3])
        path = tmp_path / "table.npz"
        tab.save(path)
        back = TransitionTable.load(path)
        assert np.array_equal(back.fields, tab.fields)
        assert back.kernel.support_dict() == tab.kernel.support_dict()
        assert np.allclose(back.field_at(0.17), tab.field_at(0.17))

    def test_cached_roundtrip(self, tmp_path):
        g = TorusGeometry(8)
        t1 = cached_transition_probs(simple_walk(1), g, 2.0, [0.0, 1.0], tmp_path)
        t2 = cached_transition_probs(simple_walk(1), g, 2.0, [0.0, 1.0], tmp_path)
        assert np.array_equal(t1.fields, t2.fields)
        assert len(list(tmp_path.glob("table_*.npz"))) == 1


class TestGreenIntegral:
    def grid_table(self, side, tmax, n):
        g = TorusGeometry(side)
        return transition_probs(symmetrize(simple_walk(1)), g, 2.0,
                                np.linspace(0.0, tmax, n))

    def test_zero(self):
        tab = self.grid_table(16, 1.0, 11)
        assert green_integral(tab, 0.0, 0.1) == 0.0

    def test_short_time_limit(self):
        tab = self.grid_table(16, 0.01, 41)
        g = green_integral(tab, 0.01, 0.001)
        assert abs(g / 0.01 - 1.0) < 0.02

    def test_grid_refinement_oracle(self):
        coarse = self.grid_table(256, 10.0, 501)
        fine = self.grid_table(256, 10.0, 5001)
        a = green_integral(coarse, 10.0, 0.02)
        b = green_integral(fine, 10.0, 0.002)
        assert abs(a - b) / b < 1e-6

    def test_nondecreasing(self):
        tab = self.grid_table(32, 4.0, 81)
        vals = [green_integral(tab, t, 0.05) for t in (0.0, 1.0, 2.0, 4.0)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_grid_too_coarse(self):
        tab = self.grid_table(16, 1.0, 11)
        with pytest.raises(ConfigurationError):
            green_integral(tab, 1.0, 0.05)

    def test_requires_symmetrized(self):
        g = TorusGeometry(16)
        tab = transition_probs(ASYM1, g, 2.0, np.linspace(0, 1, 11))
        with pytest.raises(ConfigurationError):
            green_integral(tab, 1.0, 0.2)


class TestBridgeRates:
    def test_far_horizon_matches_base_kernel(self):
        g = TorusGeometry(16)
        k = simple_walk(1)
        tab = transition_probs(k, g, 1.0, [200.0])
        rates = dict(bridge_rates(tab, k, z=0, t=0.0, T=200.0, x0=0))
        for off, p in k.support_dict().items():
            y = g.wrap(off)
            assert rates[y] == pytest.approx(p, rel=1e-4)

    def test_total_rate_matches_log_derivative(self):
        # total exit rate - 1 should equal d/ds log p(z,x0)(s) at s = T - t,
        # checked against centred finite differences on a fine grid
        g = TorusGeometry(16)
        k = ASYM1
        T, t = 3.0, 1.0
        s = T - t
        h = 1e-4
        tab = transition_probs(k, g, 1.0, [s - h, s, s + h])
        for z in (0, 3, 9):
            rates = bridge_rates(tab, k, z=z, t=t, T=T, x0=5)
            total = sum(r for _, r in rates)
            pm = tab.prob(z, 5, s - h)
            pp = tab.prob(z, 5, s + h)
            dlog = (np.log(pp) - np.log(pm)) / (2 * h)
            assert abs((total - 1.0) - dlog) < 1e-4

    def test_pull_toward_target_near_horizon(self):
        g = TorusGeometry(16)
        k = simple_walk(1)
        tab = transition_probs(k, g, 1.0, [0.05])
        rates = dict(bridge_rates(tab, k, z=6, t=0.0, T=0.05, x0=5))
        assert rates[(5,)] > rates[(7,)]

    def test_domain_and_underflow_errors(self):
        g = TorusGeometry(16)
        k = simple_walk(1)
        tab = transition_probs(k, g, 1.0, [1.0])
        with pytest.raises(ValueError):
            bridge_rates(tab, k, z=0, t=1.0, T=1.0, x0=0)
        big = TorusGeometry(301)
        tiny = transition_probs(k, big, 1.0, [1e-8])
        with pytest.raises(NumericalUnderflowError):
            bridge_rates(tiny, k, z=0, t=0.0, T=1e-8, x0=150)


class TestPairTransition:
    def test_time_zero(self):
        g = TorusGeometry(8)
        f = pair_transition(simple_walk(1), g, 0.0)
        assert f[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert f.sum() == pytest.approx(1.0, abs=1e-9)

    def test_state_cap(self):
        with pytest.raises(ConfigurationError):
            pair_transition(simple_walk(1), TorusGeometry(100), 1.0, max_states=100)

    def test_marginals_are_rate2_symmetrized(self):
        g = TorusGeometry(16)
        k = ASYM1
        t = 0.9
        f = pair_transition(k, g, t)
        marg = transition_probs(symmetrize(k), g, 2.0, [t]).fields[0]
        for which in (0, 1):
            assert np.abs(pair_marginal(f, g, which) - marg).sum() <= 1e-8

    def test_diagonal_sum_identity(self):
        # mass on the diagonal equals the symmetrized walk's return probability
        # run at doubled time (rate-1 clock), which the rate-2 table gives at t
        g = TorusGeometry(16)
        k = ASYM1
        for t in (0.3, 1.0):
            f = pair_transition(k, g, t)
            diag = pair_diagonal_sum(f, g)
            rate1 = transition_probs(symmetrize(k), g, 1.0, [t, 2 * t])
            assert diag == pytest.approx(rate1.prob(0, 0, 2 * t), abs=1e-10)
            assert diag <= rate1.prob(0, 0, t) + 1e-12

    def test_three_walk_monte_carlo_oracle(self):
        g = TorusGeometry(16)
        k = simple_walk(1)
        t = 1.0
        f = pair_transition(k, g, t)
        rng = np.random.default_rng(20240811)
        n = 1_000_000
        cum = np.cumsum(k.probs)
        offs = k.offsets[:, 0]

        def walk_endpoints():
            jumps = rng.poisson(t, size=n)
            total = int(jumps.sum())
            incs = offs[np.searchsorted(cum, rng.random(total), side="right")]
            ends = np.zeros(n, dtype=np.int64)
            np.add.at(ends, np.repeat(np.arange(n), jumps), incs)
            return ends

        y, yp, y0 = walk_endpoints(), walk_endpoints(), walk_endpoints()
        w = (y - y0) % 16
        wp = (yp - y0) % 16
        emp = np.bincount(w * 16 + wp, minlength=256).reshape(16, 16) / n
        tv = 0.5 * np.abs(emp - f).sum()
        assert tv <= 0.01


class TestTruncationHeuristic:
    def test_recommended_side_formula(self):
        k = simple_walk(1)
        assert recommended_side(k, 2.0) == int(np.ceil(12 * np.sqrt(4.0) + 2))

    def test_tail_mass_report(self):
        # the rule-of-thumb side should keep the wrapped mass below 1e-6
        rec = recommended_side(simple_walk(1), 2.0)
        rep = truncation_report(simple_walk(1), 1.0, 2.0, side=rec)
        assert rep["tail_mass"] < 1e-6
        tight = truncation_report(simple_walk(1), 1.0, 20.0, side=8)
        assert tight["tail_mass"] > rep["tail_mass"]
