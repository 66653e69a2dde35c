import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drbsde.errors import ConfigError, NumericalError
from drbsde.skorokhod import (BarrierPaths, compute_h, compute_l, decompose_value_path,
                              first_hit_times, h_profile, l_profile, reconstruct_reflection,
                              verify_skorokhod)


def const_barriers(n, lo=-1.0, hi=1.0):
    return BarrierPaths(alpha=np.full(n, lo), beta=np.full(n, hi))


def iterated_clamp(x, barriers):
    """Independent reference: step-by-step projection of the increments."""
    y = np.empty_like(x)
    y[0] = min(max(x[0], barriers.alpha[0]), barriers.beta[0])
    for k in range(1, len(x)):
        y[k] = min(max(y[k - 1] + x[k] - x[k - 1], barriers.alpha[k]), barriers.beta[k])
    return y


class TestFunctionals:
    def test_constant_path_h(self):
        bp = const_barriers(5)
        x = np.zeros(5)
        for t in range(5):
            assert compute_h(x, bp, t) == -1.0  # (0 - 1) ^ inf(0 + 1) = -1

    def test_constant_path_l(self):
        bp = const_barriers(5)
        x = np.zeros(5)
        for t in range(5):
            assert compute_l(x, bp, t) == 1.0

    def test_t0_reduces_to_upper_gap(self):
        bp = const_barriers(3, lo=-0.4, hi=0.9)
        x = np.array([0.2, 0.0, 0.0])
        assert compute_h(x, bp, 0) == pytest.approx(0.2 - 0.9, abs=1e-15)
        assert compute_l(x, bp, 0) == pytest.approx(0.2 + 0.4, abs=1e-15)

    def test_touch_at_beta_then_above_alpha_gives_zero(self):
        bp = const_barriers(5)
        x = np.array([0.0, 1.0, 0.5, 0.2, 0.0])  # touches beta at s=1, stays above alpha
        for t in range(1, 5):
            assert compute_h(x, bp, t) == 0.0

    def test_hand_built_five_node_path(self):
        bp = const_barriers(5)
        x = np.array([0.0, 0.5, 1.2, 0.8, 0.3])
        # s=2 term: (1.2 - 1) ^ min(2.2, 1.8, 1.3) = 0.2 dominates
        assert compute_h(x, bp, 4) == pytest.approx(0.2, abs=1e-15)

    def test_hand_built_lower_touch(self):
        bp = const_barriers(5)
        x = np.array([0.0, -0.6, -1.3, -0.9, 0.2])
        # brute force over all (s, r) pairs
        best = math.inf
        for s in range(5):
            inner = max(x[r] - 1.0 for r in range(s, 5))
            best = min(best, max(x[s] + 1.0, inner))
        assert compute_l(x, bp, 4) == pytest.approx(best, abs=1e-15)

    def test_profiles_match_direct_evaluation(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(2, 40))
            x = np.cumsum(rng.normal(scale=0.5, size=n))
            alpha = -1.0 - rng.random(n)
            beta = 1.0 + rng.random(n)
            bp = BarrierPaths(alpha=alpha, beta=beta)
            hp = h_profile(x, bp)
            lp = l_profile(x, bp)
            for t in range(n):
                assert hp[t] == pytest.approx(compute_h(x, bp, t), abs=1e-12)
                assert lp[t] == pytest.approx(compute_l(x, bp, t), abs=1e-12)

    def test_symmetry_flip(self):
        # L_{a,b}(x) = -H_{-b,-a}(-x)
        rng = np.random.default_rng(11)
        n = 20
        x = np.cumsum(rng.normal(size=n))
        alpha = -1.5 + 0.1 * rng.random(n)
        beta = 1.5 + 0.1 * rng.random(n)
        bp = BarrierPaths(alpha=alpha, beta=beta)
        flipped = BarrierPaths(alpha=-beta, beta=-alpha)
        for t in range(n):
            assert compute_l(x, bp, t) == pytest.approx(-compute_h(-x, flipped, t), abs=1e-12)


class TestFirstHit:
    def test_inside_forever_gives_sentinels(self):
        bp = const_barriers(6)
        t_lo, t_up = first_hit_times(np.zeros(6), bp)
        assert math.isinf(t_lo) and math.isinf(t_up)

    def test_start_on_beta(self):
        bp = const_barriers(4)
        t_lo, t_up = first_hit_times(np.array([1.0, 0.0, 0.0, 0.0]), bp)
        assert t_up == 0 and math.isinf(t_lo)

    def test_linear_scan_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(2, 30))
            x = np.cumsum(rng.normal(scale=0.8, size=n))
            bp = const_barriers(n, lo=-1.2, hi=1.1)
            t_lo, t_up = first_hit_times(x, bp)
            exp_lo = next((i for i in range(n) if x[i] <= -1.2), math.inf)
            exp_up = next((i for i in range(n) if x[i] >= 1.1), math.inf)
            assert t_lo == exp_lo and t_up == exp_up


class TestReconstruct:
    def test_no_push_case(self):
        bp = const_barriers(8)
        x = 0.5 * np.sin(np.arange(8))
        dec = reconstruct_reflection(x, bp)
        assert np.array_equal(dec.y, x)
        assert np.all(dec.xi == 0.0) and np.all(dec.a == 0.0) and np.all(dec.c == 0.0)

    def test_constant_path_above_beta(self):
        bp = const_barriers(6)
        x = np.full(6, 1.7)
        dec = reconstruct_reflection(x, bp)
        assert np.all(dec.y == 1.0)
        assert np.all(dec.a == 0.0)
        assert np.all(np.diff(dec.c) >= 0.0)
        assert dec.c[-1] == pytest.approx(0.7, abs=1e-15)

    def test_matches_iterated_clamp(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            x = np.cumsum(rng.normal(scale=0.6, size=n))
            bp = const_barriers(n, lo=-0.8, hi=0.7)
            dec = reconstruct_reflection(x, bp)
            assert np.allclose(dec.y, iterated_clamp(x, bp), atol=1e-12, rtol=0.0)

    def test_identity_and_confinement_exact(self):
        rng = np.random.default_rng(23)
        x = np.cumsum(rng.normal(scale=1.0, size=200))
        bp = const_barriers(200, lo=-0.5, hi=0.5)
        dec = reconstruct_reflection(x, bp)
        assert np.all(dec.y >= bp.alpha) and np.all(dec.y <= bp.beta)
        assert np.max(np.abs(dec.x - dec.y - dec.xi)) == 0.0

    def test_push_flatness(self):
        rng = np.random.default_rng(29)
        x = np.cumsum(rng.normal(scale=0.8, size=300))
        bp = const_barriers(300, lo=-0.6, hi=0.6)
        dec = reconstruct_reflection(x, bp)
        da = np.diff(dec.a, prepend=0.0)
        dc = np.diff(dec.c, prepend=0.0)
        assert np.all(np.abs(dec.y[da > 1e-14] - bp.alpha[da > 1e-14]) < 1e-10)
        assert np.all(np.abs(dec.y[dc > 1e-14] - bp.beta[dc > 1e-14]) < 1e-10)

    def test_barrier_gap_violation_rejected(self):
        with pytest.raises(NumericalError):
            BarrierPaths(alpha=np.array([0.0, 0.5]), beta=np.array([1.0, 0.5]))

    def test_time_varying_barriers(self):
        n = 50
        t = np.linspace(0.0, 1.0, n)
        alpha = -0.29 * np.exp(-0.04 * t)
        beta = 1.34 * np.exp(-0.04 * t)
        bp = BarrierPaths(alpha=alpha, beta=beta)
        x = np.cumsum(np.random.default_rng(4).normal(scale=0.4, size=n))
        dec = reconstruct_reflection(x, bp)
        assert np.allclose(dec.y, iterated_clamp(x, bp), atol=1e-12)
        report = verify_skorokhod(dec)
        assert report.passed

    @given(st.lists(st.floats(-3.0, 3.0), min_size=2, max_size=40))
    @settings(max_examples=200, deadline=None)
    def test_idempotent_on_reflected_paths(self, values):
        x = np.asarray(values)
        bp = const_barriers(len(x), lo=-3.5, hi=3.5)
        dec = reconstruct_reflection(x, bp)
        assert np.all(dec.xi == 0.0)
        assert np.array_equal(dec.y, x)

    @given(st.lists(st.floats(-50.0, 50.0), min_size=2, max_size=40),
           st.floats(0.1, 5.0), st.floats(0.1, 5.0))
    @settings(max_examples=200, deadline=None)
    def test_clamp_equivalence_property(self, values, lo, hi):
        x = np.asarray(values)
        bp = const_barriers(len(x), lo=-lo, hi=hi)
        dec = reconstruct_reflection(x, bp)
        scale = max(1.0, float(np.max(np.abs(x))))
        assert np.allclose(dec.y, iterated_clamp(x, bp), atol=1e-12 * scale, rtol=0.0)
        assert verify_skorokhod(dec).start_violation >= 0.0


class TestVerify:
    def test_valid_decomposition_passes(self):
        x = np.cumsum(np.random.default_rng(5).normal(scale=0.7, size=100))
        dec = reconstruct_reflection(x, const_barriers(100, lo=-0.7, hi=0.9))
        report = verify_skorokhod(dec, tol=1e-8)
        assert report.passed
        assert "pass" in report.summary()

    def test_corrupted_monotonicity_fails_with_location(self):
        x = np.cumsum(np.random.default_rng(6).normal(scale=0.7, size=100))
        dec = reconstruct_reflection(x, const_barriers(100, lo=-0.6, hi=0.6))
        bad_a = dec.a.copy()
        drop_at = 40
        bad_a[drop_at] = bad_a[drop_at - 1] - 0.5
        from dataclasses import replace
        corrupted = replace(dec, a=bad_a)
        report = verify_skorokhod(corrupted)
        assert not report.passed
        assert report.max_monotonicity_violation >= 0.5


class TestValuePathDecomposition:
    def test_reproduces_clamped_path(self):
        rng = np.random.default_rng(31)
        n = 50
        t = np.linspace(0.0, 1.0, n + 1)
        alpha = np.full(n + 1, -0.5)
        beta = np.full(n + 1, 0.5)
        y_tilde = np.cumsum(rng.normal(scale=0.3, size=n))
        dec = decompose_value_path(y_tilde, 0.0, alpha, beta, times=t)
        clamped = np.clip(y_tilde, -0.5, 0.5)
        assert np.allclose(dec.y[:n], clamped, atol=1e-8, rtol=0.0)
        assert dec.y[n] == 0.0

    def test_original_time_pushes_start_at_zero_and_grow(self):
        rng = np.random.default_rng(37)
        n = 30
        alpha = np.full(n + 1, -0.4)
        beta = np.full(n + 1, 0.4)
        y_tilde = np.cumsum(rng.normal(scale=0.4, size=n))
        dec = decompose_value_path(y_tilde, 0.0, alpha, beta)
        assert dec.a[0] == 0.0 and dec.c[0] == 0.0
        assert np.all(np.diff(dec.a) >= -1e-15)
        assert np.all(np.diff(dec.c) >= -1e-15)

    def test_terminal_outside_barriers_rejected(self):
        with pytest.raises(ConfigError):
            decompose_value_path(np.zeros(3), 2.0, np.full(4, -1.0), np.full(4, 1.0))

    def test_no_touch_path_has_zero_pushes(self):
        n = 20
        y_tilde = 0.1 * np.sin(np.arange(n))
        dec = decompose_value_path(y_tilde, 0.0, np.full(n + 1, -1.0), np.full(n + 1, 1.0))
        assert np.all(dec.a == 0.0) and np.all(dec.c == 0.0)
        report = verify_skorokhod(dec.reversed)
        assert report.passed
