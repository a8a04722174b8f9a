"""Range moments: spec examples, quadrature oracles, structural properties."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xinr import autodiff as ad
from xinr import range_stats as rs


def quadrature_oracle(vertex_values, lo, hi, n=2_000_001):
    """Dumb midpoint quadrature of the interpolated channel over [lo, hi]."""
    vertex_values = np.atleast_2d(np.asarray(vertex_values, dtype=np.float64))
    if vertex_values.shape[0] == 1:
        vertex_values = vertex_values.T
    r = vertex_values.shape[0]
    h = 2.0 / (r - 1)
    xs = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    j = np.minimum(((xs + 1) / h).astype(np.int64), r - 2)
    t = (xs - (-1.0 + j * h)) / h
    f = vertex_values[j] * (1 - t)[:, None] + vertex_values[j + 1] * t[:, None]
    mean = f.mean(axis=0)
    var = (f * f).mean(axis=0) - mean ** 2
    mu_p, sig_p = (lo + hi) / 2, (hi - lo) / np.sqrt(12)
    z = (xs - mu_p) / sig_p
    beta = (f * z[:, None]).mean(axis=0)
    return mean, var, beta


class TestExtractPiecewise:
    def test_single_cell_gives_one_segment(self):
        verts = np.linspace(0, 1, 4)[:, None]
        pw = rs.extract_piecewise(verts, -0.9, -0.5)   # inside first cell
        assert pw.breakpoints.size == 2

    def test_full_line_breakpoint_count(self):
        verts = np.arange(16, dtype=np.float64)[:, None]
        pw = rs.extract_piecewise(verts, -1.0, 1.0)
        assert pw.breakpoints.size == 16

    def test_breakpoint_values_match_interpolation(self, rng):
        verts = rng.standard_normal((9, 4))
        lo, hi = -0.83, 0.41
        pw = rs.extract_piecewise(verts, lo, hi)
        h = 2.0 / 8
        for bp, val in zip(pw.breakpoints, pw.values):
            j = min(int((bp + 1) / h), 7)
            t = (bp - (-1 + j * h)) / h
            np.testing.assert_allclose(val, verts[j] * (1 - t) + verts[j + 1] * t,
                                       atol=1e-12)

    def test_degenerate_range_rejected(self):
        verts = np.zeros((4, 1))
        with pytest.raises(rs.DegenerateRangeError):
            rs.extract_piecewise(verts, 0.5, 0.5 + 1e-14)


class TestRangeMean:
    def test_constant_channel(self):
        pw = rs.PiecewiseLinear(np.array([-0.5, 0.1, 0.8]), np.full((3, 2), 4.2))
        np.testing.assert_allclose(rs.range_mean(pw), 4.2, atol=1e-14)

    def test_single_ramp(self):
        pw = rs.PiecewiseLinear(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]))
        assert rs.range_mean(pw)[0] == pytest.approx(0.5, abs=1e-15)

    def test_two_segment_hand_quadrature(self):
        # 0 -> 1 on [0, 1], 1 -> 0 on [1, 3]: (0.5*1 + 2*0.5)/3 = 0.5
        pw = rs.PiecewiseLinear(np.array([0.0, 1.0, 3.0]),
                                np.array([[0.0], [1.0], [0.0]]))
        assert rs.range_mean(pw)[0] == pytest.approx(0.5, abs=1e-12)


class TestRangeVariance:
    def test_constant_channel_zero(self):
        pw = rs.PiecewiseLinear(np.array([-0.5, 0.8]), np.full((2, 3), 1.7))
        np.testing.assert_allclose(rs.range_variance(pw), 0.0, atol=1e-15)

    def test_uniform_ramp_is_one_twelfth(self):
        pw = rs.PiecewiseLinear(np.array([0.0, 1.0]), np.array([[0.0], [1.0]]))
        assert rs.range_variance(pw)[0] == pytest.approx(1 / 12, abs=1e-15)

    def test_multi_segment_against_monte_carlo(self, rng):
        verts = rng.standard_normal((7, 3))
        lo, hi = -0.7, 0.9
        pw = rs.extract_piecewise(verts, lo, hi)
        var = rs.range_variance(pw)
        n = 1_000_000
        xs = rng.uniform(lo, hi, n)
        h = 2.0 / 6
        j = np.minimum(((xs + 1) / h).astype(np.int64), 5)
        t = (xs - (-1 + j * h)) / h
        f = verts[j] * (1 - t)[:, None] + verts[j + 1] * t[:, None]
        mc_var = f.var(axis=0, ddof=1)
        se = mc_var * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(var - mc_var) < 3 * se + 1e-9)


class TestRangeParamCov:
    def test_constant_channel_zero(self):
        pw = rs.PiecewiseLinear(np.array([-0.5, 0.8]), np.full((2, 2), 1.7))
        np.testing.assert_allclose(rs.range_param_cov(pw), 0.0, atol=1e-15)

    def test_full_ramp_equals_sigma(self):
        # perfectly correlated channel: |beta| = sqrt(variance)
        pw = rs.PiecewiseLinear(np.array([-0.4, 0.6]), np.array([[0.2], [1.4]]))
        beta = rs.range_param_cov(pw)[0]
        assert beta == pytest.approx(np.sqrt(rs.range_variance(pw)[0]), abs=1e-12)
        assert beta > 0

    def test_symmetric_tent_is_zero(self):
        pw = rs.PiecewiseLinear(np.array([-0.5, 0.0, 0.5]),
                                np.array([[0.0], [1.0], [0.0]]))
        assert rs.range_param_cov(pw)[0] == pytest.approx(0.0, abs=1e-15)

    def test_decreasing_ramp_is_negative(self):
        pw = rs.PiecewiseLinear(np.array([-0.4, 0.6]), np.array([[1.4], [0.2]]))
        assert rs.range_param_cov(pw)[0] < 0


class TestOracleAgreement:
    def test_hundred_random_ranges_match_quadrature(self, rng):
        for _ in range(100):
            r = int(rng.integers(2, 12))
            verts = rng.standard_normal((r, 2))
            lo = rng.uniform(-1, 0.8)
            hi = rng.uniform(lo + 0.05, 1.0)
            pw = rs.extract_piecewise(verts, lo, hi)
            mean, var, beta = (rs.range_mean(pw), rs.range_variance(pw),
                               rs.range_param_cov(pw))
            qmean, qvar, qbeta = quadrature_oracle(verts, lo, hi, n=400_001)
            # midpoint quadrature on 4e5 points carries ~1e-6 discretization
            # error; closed forms agree to that, and exactly per-segment
            np.testing.assert_allclose(mean, qmean, atol=2e-5)
            np.testing.assert_allclose(var, qvar, atol=2e-5)
            np.testing.assert_allclose(beta, qbeta, atol=2e-5)

    def test_exact_against_per_segment_quadrature(self, rng):
        # Gauss-Legendre per segment is exact for the polynomial integrands
        nodes, weights = np.polynomial.legendre.leggauss(4)
        for _ in range(50):
            r = int(rng.integers(2, 10))
            verts = rng.standard_normal((r, 1))
            lo = rng.uniform(-1, 0.7)
            hi = rng.uniform(lo + 0.1, 1.0)
            pw = rs.extract_piecewise(verts, lo, hi)
            a, v = pw.breakpoints, pw.values[:, 0]
            mu_p = (lo + hi) / 2
            sig_p = (hi - lo) / np.sqrt(12)
            tot = hi - lo
            got = np.zeros(3)
            for s in range(len(a) - 1):
                half = (a[s + 1] - a[s]) / 2
                xs = a[s] + half * (nodes + 1)
                fs = v[s] + (v[s + 1] - v[s]) * (xs - a[s]) / (a[s + 1] - a[s])
                w = weights * half
                got += [np.sum(w * fs), np.sum(w * fs * fs),
                        np.sum(w * fs * (xs - mu_p) / sig_p)]
            got /= tot
            assert rs.range_mean(pw)[0] == pytest.approx(got[0], abs=1e-12)
            assert rs.range_variance(pw)[0] == pytest.approx(got[1] - got[0] ** 2,
                                                             abs=1e-9)
            assert rs.range_param_cov(pw)[0] == pytest.approx(got[2], abs=1e-12)


class TestProperties:
    @given(st.integers(2, 10), st.floats(-1.0, 0.8), st.floats(0.05, 1.0),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_cauchy_schwarz(self, r, lo, width, seed):
        hi = min(lo + width, 1.0)
        if hi - lo < 1e-6:
            return
        verts = np.random.default_rng(seed).standard_normal((r, 3))
        pw = rs.extract_piecewise(verts, lo, hi)
        var = rs.range_variance(pw)
        beta = rs.range_param_cov(pw)
        assert np.all(beta ** 2 <= var + 1e-12)

    def test_cauchy_schwarz_equality_iff_affine(self):
        pw = rs.PiecewiseLinear(np.array([-0.3, 0.5]), np.array([[1.0], [2.0]]))
        assert rs.range_param_cov(pw)[0] ** 2 == pytest.approx(
            rs.range_variance(pw)[0], rel=1e-12)

    def test_point_limit(self, rng):
        verts = rng.standard_normal((6, 2))
        x0 = 0.234
        h = 2.0 / 5
        j = min(int((x0 + 1) / h), 4)
        t = (x0 - (-1 + j * h)) / h
        interp = verts[j] * (1 - t) + verts[j + 1] * t
        # cancellation noise in E[F^2] - mean^2 caps the attainable accuracy
        # at tiny widths; 1e-9 is the documented absolute moment tolerance
        slope_bound = np.max(np.abs(np.diff(verts, axis=0))) / h
        for eps in (1e-3, 1e-5, 1e-7):
            pw = rs.extract_piecewise(verts, x0 - eps, x0 + eps)
            np.testing.assert_allclose(rs.range_mean(pw), interp, atol=5 * eps)
            assert np.all(rs.range_variance(pw) < (slope_bound * eps) ** 2 + 1e-9)
            assert np.all(np.abs(rs.range_param_cov(pw)) < slope_bound * eps + 1e-9)


class TestBandedFormulation:
    """The cell-clipped weight route must agree with the piecewise route."""

    def test_matches_piecewise_route(self, rng):
        for _ in range(30):
            r = int(rng.integers(2, 14))
            verts = rng.standard_normal((r, 3))
            lo = rng.uniform(-1, 0.7)
            hi = rng.uniform(lo + 0.05, 1.0)
            pw = rs.extract_piecewise(verts, lo, hi)
            aw = rs.axis_range_weights(r, lo, hi)
            mean, second, betas = rs.box_moments(verts, [aw])
            np.testing.assert_allclose(mean, rs.range_mean(pw), atol=1e-12)
            np.testing.assert_allclose(second - mean ** 2, rs.range_variance(pw),
                                       atol=1e-12)
            np.testing.assert_allclose(betas[0], rs.range_param_cov(pw), atol=1e-12)

    def test_windowed_matches_full(self, rng):
        r = 40
        verts = rng.standard_normal((r, 2))
        lo, hi = -0.12, 0.07
        start, n = rs.axis_window(r, lo, hi)
        aw_full = rs.axis_range_weights(r, lo, hi)
        aw_win = rs.axis_range_weights(r, lo, hi, window=(start, n))
        m1, s1, b1 = rs.box_moments(verts, [aw_full])
        m2, s2, b2 = rs.box_moments(verts[start:start + n], [aw_win])
        np.testing.assert_allclose(m1, m2, atol=1e-13)
        np.testing.assert_allclose(s1, s2, atol=1e-13)
        np.testing.assert_allclose(b1[0], b2[0], atol=1e-13)

    def test_2d_box_against_monte_carlo(self, rng):
        r, c = 7, 2
        plane = rng.standard_normal((r, r, c))
        lox, hix, loy, hiy = -0.55, 0.3, 0.05, 0.95
        awx = rs.axis_range_weights(r, lox, hix)
        awy = rs.axis_range_weights(r, loy, hiy)
        mean, second, betas = rs.box_moments(plane, [awx, awy])
        n = 1_500_000
        xs = rng.uniform(lox, hix, n)
        ys = rng.uniform(loy, hiy, n)
        h = 2.0 / (r - 1)
        jx = np.minimum(((xs + 1) / h).astype(np.int64), r - 2)
        jy = np.minimum(((ys + 1) / h).astype(np.int64), r - 2)
        tx = (xs - (-1 + jx * h)) / h
        ty = (ys - (-1 + jy * h)) / h
        f = (plane[jx, jy] * ((1 - tx) * (1 - ty))[:, None]
             + plane[jx, jy + 1] * ((1 - tx) * ty)[:, None]
             + plane[jx + 1, jy] * (tx * (1 - ty))[:, None]
             + plane[jx + 1, jy + 1] * (tx * ty)[:, None])
        se = f.std(axis=0) / np.sqrt(n)
        np.testing.assert_allclose(mean, f.mean(axis=0), atol=4 * se.max())
        np.testing.assert_allclose(second, (f * f).mean(axis=0),
                                   atol=6 * se.max())
        zx = (xs - (lox + hix) / 2) / ((hix - lox) / np.sqrt(12))
        np.testing.assert_allclose(betas[0], (f * zx[:, None]).mean(axis=0),
                                   atol=4 * se.max())

    def test_point_axis_weights_reduce_to_interpolation(self, rng):
        r = 6
        plane = rng.standard_normal((r, r, 3))
        # y fixed at a point, x ranged: restriction equals interpolating y first
        y0 = 0.37
        h = 2.0 / (r - 1)
        j = min(int((y0 + 1) / h), r - 2)
        t = (y0 - (-1 + j * h)) / h
        restricted = plane[:, j] * (1 - t) + plane[:, j + 1] * t
        lo, hi = -0.8, 0.55
        aw_x = rs.axis_range_weights(r, lo, hi)
        aw_y = rs.axis_point_weights(r, t, j)
        mean2, second2, betas2 = rs.box_moments(plane[:, j:j + 2], [aw_x, aw_y])
        pw = rs.extract_piecewise(restricted, lo, hi)
        np.testing.assert_allclose(mean2, rs.range_mean(pw), atol=1e-12)
        np.testing.assert_allclose(second2 - mean2 ** 2, rs.range_variance(pw),
                                   atol=1e-12)

    def test_gradient_of_moments_wrt_bounds(self, rng):
        r = 8
        verts = rng.standard_normal((r, 2))
        lo0, hi0 = -0.41, 0.52
        tape = ad.Tape()
        lo = tape.leaf(np.array(lo0), "lo")
        hi = tape.leaf(np.array(hi0), "hi")
        aw = rs.axis_range_weights(r, lo, hi)
        mean, second, betas = rs.box_moments(verts, [aw])
        loss = ad.vsum(mean) + ad.vsum(second) + ad.vsum(betas[0])
        rep = tape.backward(loss)
        h = 1e-7
        for name, v0 in (("lo", lo0), ("hi", hi0)):
            def f(v):
                awn = rs.axis_range_weights(r, v if name == "lo" else lo0,
                                            v if name == "hi" else hi0)
                m, s, b = rs.box_moments(verts, [awn])
                return float(np.sum(m) + np.sum(s) + np.sum(b[0]))
            num = (f(v0 + h) - f(v0 - h)) / (2 * h)
            assert abs(rep.grads[name] - num) / max(abs(num), 1e-9) < 1e-5
