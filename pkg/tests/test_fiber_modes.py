import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import jn_zeros, jv, kv

from fiberm2.fiber_modes import (
    EXPERIMENT_FIBER,
    DEFAULT_FIBER,
    FiberSpec,
    Grid,
    LPMode,
    dispersion_residual,
    mode_field,
    mode_fields,
    mode_orthogonality_check,
    solve_modes,
    v_number,
)
from fiberm2.fiber_modes import _unnormalized_field

A = DEFAULT_FIBER.core_radius


def spec_with_v(v, na=0.1, wavelength=1.0):
    return FiberSpec(v * wavelength / (2 * math.pi * na), na, wavelength)


def cutoff_count(v, lmax=12):
    """Guided-mode count from the LP cutoff rule.

    LP_lm is cut off at the m-th zero of J_{l-1} (LP_0m at the (m-1)-th zero
    of J_1, with LP01 never cut off). Each l >= 1 solution is a parity pair.
    """
    total = 1  # LP01
    total += int(np.sum(jn_zeros(1, 20) < v))
    for l in range(1, lmax):
        total += 2 * int(np.sum(jn_zeros(l - 1, 20) < v))
    return total


def exact_power(mode, a):
    """Closed-form integral of the unnormalized mode intensity over the plane."""
    l, u, w = mode.l, mode.u, mode.w
    core = 0.5 * (jv(l, u) ** 2 - jv(l - 1, u) * jv(l + 1, u)) / jv(l, u) ** 2
    clad = 0.5 * (kv(l - 1, w) * kv(l + 1, w) - kv(l, w) ** 2) / kv(l, w) ** 2
    azimuth = 2 * math.pi if l == 0 else math.pi
    return a * a * azimuth * (core + clad)


class TestVNumber:
    def test_experiment_fiber(self):
        assert v_number(EXPERIMENT_FIBER) == pytest.approx(4.80, abs=0.01)

    def test_simulation_fiber(self):
        assert v_number(DEFAULT_FIBER) == pytest.approx(5.90, abs=0.01)

    def test_small_core_limit(self):
        vals = [v_number(FiberSpec(a, 0.08, 1.064)) for a in (1e-3, 1e-6, 1e-9)]
        assert vals[0] > vals[1] > vals[2] > 0
        assert vals[-1] < 1e-8

    def test_from_diameter(self):
        assert FiberSpec.from_diameter(25.0, 0.08, 1.064) == DEFAULT_FIBER

    @pytest.mark.parametrize("args", [(0, 0.1, 1), (-1, 0.1, 1), (1, 0, 1), (1, 1, 1), (1, 0.1, 0)])
    def test_invalid_spec(self, args):
        with pytest.raises(ValueError):
            FiberSpec(*args)


class TestSolveModes:
    def test_ten_mode_order(self):
        names = [m.name for m in solve_modes(DEFAULT_FIBER)]
        assert names == ["LP01", "LP11e", "LP11o", "LP21e", "LP21o",
                         "LP02", "LP31e", "LP31o", "LP12e", "LP12o"]

    def test_six_mode_prefix(self):
        names = [m.name for m in solve_modes(EXPERIMENT_FIBER)]
        assert names == ["LP01", "LP11e", "LP11o", "LP21e", "LP21o", "LP02"]

    def test_below_first_cutoff_is_single_mode(self):
        modes = solve_modes(spec_with_v(2.0))
        assert [m.name for m in modes] == ["LP01"]
        assert 2.0 < jn_zeros(0, 1)[0]

    @pytest.mark.parametrize("v,count", [(2.0, 1), (4.80, 6), (5.90, 10)])
    def test_counts(self, v, count):
        assert len(solve_modes(spec_with_v(v))) == count

    def test_eigenvalue_invariants(self):
        for spec in (DEFAULT_FIBER, EXPERIMENT_FIBER):
            v = spec.v
            for m in solve_modes(spec):
                assert 0 < m.u < v and m.w > 0
                assert m.u ** 2 + m.w ** 2 == pytest.approx(v * v, rel=1e-12)
                assert dispersion_residual(m.l, m.u, v, m.w) < 1e-8

    def test_parity_pairs_share_eigenvalues(self):
        modes = solve_modes(DEFAULT_FIBER)
        by_lm = {}
        for m in modes:
            by_lm.setdefault((m.l, m.m), []).append(m)
        for (l, _), group in by_lm.items():
            assert len(group) == (1 if l == 0 else 2)
            assert len({(g.u, g.w) for g in group}) == 1

    def test_roots_against_high_precision_oracle(self):
        mpmath.mp.dps = 40
        for spec in (DEFAULT_FIBER, EXPERIMENT_FIBER):
            v = mpmath.mpf(spec.v)
            for m in solve_modes(spec):
                if m.parity == "odd":
                    continue
                l = m.l

                def f(u):
                    w = mpmath.sqrt(v * v - u * u)
                    return (u * mpmath.besselj(l + 1, u) / mpmath.besselj(l, u)
                            - w * mpmath.besselk(l + 1, w) / mpmath.besselk(l, w))

                root = mpmath.findroot(f, (mpmath.mpf(m.u) - 1e-6, mpmath.mpf(m.u) + 1e-6),
                                      solver="anderson")
                assert abs(float(root) - m.u) < 1e-10

    def test_bessel_routines_accuracy(self):
        mpmath.mp.dps = 30
        for l in range(0, 5):
            for x in np.linspace(0.05, 9.95, 37):
                j_ref = float(mpmath.besselj(l, x))
                k_ref = float(mpmath.besselk(l, x))
                if abs(j_ref) > 1e-3:
                    assert abs(jv(l, x) / j_ref - 1) < 1e-12
                assert abs(kv(l, x) / k_ref - 1) < 1e-12

    @pytest.mark.parametrize("v", [3.84375, 3.833])
    def test_lp02_just_above_cutoff(self, v):
        # w is ~1e-10 (and ~1e-88) here: u equals V to double precision
        modes = solve_modes(spec_with_v(v))
        lp02 = [m for m in modes if (m.l, m.m) == (0, 2)]
        assert len(modes) == 6 and len(lp02) == 1
        assert 0 < lp02[0].w < 1e-9
        assert dispersion_residual(0, lp02[0].u, v, lp02[0].w) < 1e-8

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.5, 9.0))
    def test_count_matches_cutoff_rule(self, v):
        cut = np.concatenate([jn_zeros(l, 5) for l in range(10)])
        if np.min(np.abs(cut - v)) < 1e-3:
            return
        assert len(solve_modes(spec_with_v(v))) == cutoff_count(v)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.5, 9.0), st.floats(0.5, 9.0))
    def test_count_monotone_in_v(self, v1, v2):
        lo, hi = sorted((v1, v2))
        assert len(solve_modes(spec_with_v(lo))) <= len(solve_modes(spec_with_v(hi)))


class TestModeField:
    grid = Grid(128, 3 * A)

    def test_unit_power(self):
        for m in solve_modes(DEFAULT_FIBER):
            psi = mode_field(m, DEFAULT_FIBER, self.grid)
            assert np.sum(psi ** 2) * self.grid.cell_area == pytest.approx(1.0, abs=1e-9)

    def test_lp01_symmetric_peak_at_center(self):
        psi = mode_field(solve_modes(DEFAULT_FIBER)[0], DEFAULT_FIBER, self.grid)
        c = self.grid.n // 2
        assert np.unravel_index(np.argmax(psi), psi.shape) == (c, c)
        inner = psi[1:, 1:]  # drop the unpaired first row/column
        np.testing.assert_allclose(inner, inner.T, atol=1e-14)
        np.testing.assert_allclose(inner, inner[::-1, :], atol=1e-14)

    def test_parity_pair_rotation(self):
        modes = solve_modes(DEFAULT_FIBER)
        for even, odd in ((modes[1], modes[2]), (modes[8], modes[9])):
            pe = mode_field(even, DEFAULT_FIBER, self.grid)[1:, 1:]
            po = mode_field(odd, DEFAULT_FIBER, self.grid)[1:, 1:]
            # rows run along +y, so k=-1 is a physical +90 deg turn: cos(phi) -> sin(phi)
            np.testing.assert_allclose(np.rot90(pe, k=-1), po, atol=1e-12)

    def test_continuity_at_core_boundary(self):
        from fiberm2.fiber_modes import radial_profile
        for m in solve_modes(DEFAULT_FIBER):
            r = np.array([1 - 1e-9, 1 + 1e-9])
            inside, outside = radial_profile(m, r)
            assert inside == pytest.approx(1.0, abs=1e-8)
            assert outside == pytest.approx(1.0, abs=1e-8)

    def test_foreign_mode_rejected(self):
        m = solve_modes(DEFAULT_FIBER)[0]
        with pytest.raises(ValueError):
            mode_field(m, EXPERIMENT_FIBER, self.grid)
        bogus = LPMode(0, 1, "even", m.u * 0.9, math.sqrt(DEFAULT_FIBER.v ** 2 - (m.u * 0.9) ** 2))
        with pytest.raises(ValueError):
            mode_field(bogus, DEFAULT_FIBER, self.grid)

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            LPMode(0, 1, "odd", 1.0, 1.0)

    def test_grid_too_small(self):
        with pytest.raises(ValueError):
            mode_field(solve_modes(DEFAULT_FIBER)[0], DEFAULT_FIBER, Grid(64, 0.5 * A))

    @pytest.mark.parametrize("n", [16, 33])
    def test_invalid_grid(self, n):
        with pytest.raises(ValueError):
            Grid(n, 10.0)

    def test_quadrature_matches_closed_form(self):
        grid = Grid(1024, 8 * A)
        for m in solve_modes(DEFAULT_FIBER)[::2]:
            num = np.sum(_unnormalized_field(m, DEFAULT_FIBER, grid) ** 2) * grid.cell_area
            assert num == pytest.approx(exact_power(m, A), rel=1e-6)

    def test_doubling_grid_converges(self):
        grid = Grid(512, 8 * A)
        fine = Grid(1024, 8 * A)
        for m in solve_modes(DEFAULT_FIBER)[::2]:
            coarse_p = np.sum(_unnormalized_field(m, DEFAULT_FIBER, grid) ** 2) * grid.cell_area
            fine_p = np.sum(_unnormalized_field(m, DEFAULT_FIBER, fine) ** 2) * fine.cell_area
            assert abs(fine_p / coarse_p - 1) < 3e-6
            for g in (grid, fine):
                psi = mode_field(m, DEFAULT_FIBER, g)
                assert abs(np.sum(psi ** 2) * g.cell_area - 1) < 1e-6

    def test_power_captured_by_window(self):
        # fraction of the analytic power inside the square window
        for extent, floor in ((3.0, 0.999), (6.0, 0.999999)):
            grid = Grid(512, extent * A)
            for m in solve_modes(DEFAULT_FIBER)[::2]:
                num = np.sum(_unnormalized_field(m, DEFAULT_FIBER, grid) ** 2) * grid.cell_area
                assert num / exact_power(m, A) > floor


class TestOrthogonality:
    def test_lp01_lp11e(self):
        grid = Grid(128, 3 * A)
        fields = mode_fields(DEFAULT_FIBER, grid, 2)
        gram = mode_orthogonality_check(fields, grid)
        assert abs(gram[0, 1]) < 1e-3

    def test_single_mode(self):
        grid = Grid(128, 3 * A)
        gram = mode_orthogonality_check(mode_fields(DEFAULT_FIBER, grid, 1), grid)
        assert gram.shape == (1, 1) and gram[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_parity_pair_exact(self):
        grid = Grid(128, 3 * A)
        fields = mode_fields(DEFAULT_FIBER, grid)[1:3]
        assert abs(mode_orthogonality_check(fields, grid)[0, 1]) < 1e-14

    def test_full_basis_label_grid(self):
        grid = Grid(128, 6 * A)
        gram = mode_orthogonality_check(mode_fields(DEFAULT_FIBER, grid), grid)
        np.testing.assert_allclose(gram, np.eye(10), atol=1e-3)

    def test_mismatched_grid(self):
        grid = Grid(128, 3 * A)
        with pytest.raises(ValueError):
            mode_orthogonality_check([np.zeros((64, 64))], grid)

    def test_cache_is_read_only(self):
        fields = mode_fields(DEFAULT_FIBER, Grid(64, 3 * A), 3)
        with pytest.raises(ValueError):
            fields[0, 0, 0] = 1.0
