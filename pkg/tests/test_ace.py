import numpy as np
import pytest
from scipy.integrate import quad

from acedlnm.ace import (
    _lag_partition,
    ace_bound,
    ace_value,
    compute_lag_integrals,
    moment_matrix,
    weighted_exposure,
)
from acedlnm.reparam import build_sum_to_zero, gram_matrix, phi_to_alpha
from acedlnm.splines import BSplineBasis, build_knots, interpolate_exposure

L = 15.0


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(11)
    n = 120
    t = np.arange(1.0, n + 1)
    x = rng.lognormal(2.0, 0.5, n)
    spline = interpolate_exposure(t, x)
    w_basis = BSplineBasis(build_knots((0.0, L), 10))
    times = np.arange(16.0, n + 1)
    return spline, w_basis, times


def breakpoints(spline, w_basis, t):
    k = np.r_[w_basis.knots, t - spline.basis.knots]
    return np.unique(k[(k > 0) & (k < L)])


def quad_lag_integral(spline, w_basis, t, q):
    e = np.zeros(w_basis.n_basis)
    e[q] = 1.0
    val, _ = quad(lambda l: w_basis(l, e)[0] * spline(t - l)[0], 0, L,
                  points=breakpoints(spline, w_basis, t), limit=500, epsabs=0, epsrel=1e-13)
    return val


class TestMoments:
    def test_entries(self):
        H = moment_matrix()
        assert H[0, 0] == 2 and H[0, 1] == 0
        np.testing.assert_allclose(H[0, 2], 2 / 3, rtol=1e-15)
        np.testing.assert_allclose(H, H.T)


class TestLagIntegrals:
    def test_constant_exposure(self):
        t = np.arange(1.0, 61.0)
        spline = interpolate_exposure(t, np.full(60, 2.5))
        w_basis = BSplineBasis(build_knots((0.0, L), 8))
        D = compute_lag_integrals(spline, w_basis, np.arange(16.0, 61.0)).matrix
        alpha = np.random.default_rng(0).standard_normal(w_basis.n_basis)
        brk = w_basis.knot_vector.interior
        integral_w = sum(quad(lambda l: w_basis(l, alpha)[0], a, b, epsrel=1e-14)[0]
                         for a, b in zip(brk[:-1], brk[1:]))
        np.testing.assert_allclose(D @ alpha, 2.5 * integral_w, rtol=1e-12)

    def test_matches_quadrature(self, setup):
        spline, w_basis, times = setup
        D = compute_lag_integrals(spline, w_basis, times).matrix
        rng = np.random.default_rng(12)
        for _ in range(30):
            i = int(rng.integers(len(times)))
            q = int(rng.integers(w_basis.n_basis))
            oracle = quad_lag_integral(spline, w_basis, times[i], q)
            assert abs(D[i, q] - oracle) / (1 + abs(oracle)) < 1e-8

    def test_fractional_times(self, setup):
        spline, w_basis, _ = setup
        times = np.array([20.3, 47.75, 99.5])
        D = compute_lag_integrals(spline, w_basis, times).matrix
        for i, t in enumerate(times):
            for q in (0, 5, w_basis.n_basis - 1):
                np.testing.assert_allclose(D[i, q], quad_lag_integral(spline, w_basis, t, q), rtol=1e-9, atol=1e-12)

    def test_naive_variant_identical(self, setup):
        spline, w_basis, times = setup
        fast = compute_lag_integrals(spline, w_basis, times).matrix
        naive = compute_lag_integrals(spline, w_basis, times, naive=True).matrix
        np.testing.assert_allclose(fast, naive, rtol=1e-12, atol=1e-12)

    def test_partition_covers_window(self, setup):
        spline, w_basis, times = setup
        wk = w_basis.knots
        breaks = wk[(wk > 0) & (wk < L)]
        for t in (16.0, 33.5, 70.25):
            part = _lag_partition(spline, breaks, L, t)
            np.testing.assert_allclose(np.sum(part.right - part.left), L, atol=1e-12)
            np.testing.assert_allclose(part.right[:-1], part.left[1:], atol=0)
            assert np.all(part.right > part.left)

    def test_window_must_be_covered(self, setup):
        spline, w_basis, _ = setup
        with pytest.raises(ValueError):
            compute_lag_integrals(spline, w_basis, np.array([5.0]))


class TestBound:
    def test_constant_exposure(self):
        t = np.arange(1.0, 41.0)
        spline = interpolate_exposure(t, np.full(40, -1.5))
        b = ace_bound(spline, L, np.arange(16.0, 41.0))
        np.testing.assert_allclose(b.per_time, 1.5 * np.sqrt(L), rtol=1e-12)
        assert b.rounded == np.ceil(1.5 * np.sqrt(L))

    def test_matches_quadrature(self, setup):
        spline, w_basis, times = setup
        b = ace_bound(spline, L, times)
        for i in (0, 17, 60, len(times) - 1):
            k = times[i] - spline.basis.knots
            pts = np.unique(k[(k > 0) & (k < L)])
            oracle = quad(lambda l: spline(times[i] - l)[0] ** 2, 0, L, points=pts, limit=500, epsrel=1e-13)[0]
            np.testing.assert_allclose(b.per_time[i], np.sqrt(oracle), rtol=1e-8)
        assert b.e_bar == b.per_time.max()

    def test_bounds_every_unit_norm_weight(self, setup):
        spline, w_basis, times = setup
        stz = build_sum_to_zero(w_basis)
        C = gram_matrix(stz)
        Dp = compute_lag_integrals(spline, w_basis, times).matrix @ stz.transform
        b = ace_bound(spline, L, times)
        rng = np.random.default_rng(13)
        for _ in range(1000):
            a = phi_to_alpha(rng.standard_normal(w_basis.n_basis - 1) * rng.uniform(0, 3), C).alpha_w_plus
            E = Dp @ a
            assert np.all(np.abs(E) <= b.per_time * (1 + 1e-10))

    def test_equality_for_constant_weight(self):
        t = np.arange(1.0, 41.0)
        spline = interpolate_exposure(t, np.full(40, 2.0))
        w_basis = BSplineBasis(build_knots((0.0, L), 8))
        stz = build_sum_to_zero(w_basis)
        C = gram_matrix(stz)
        times = np.arange(16.0, 41.0)
        E = compute_lag_integrals(spline, w_basis, times).matrix @ stz.transform @ phi_to_alpha(
            np.zeros(w_basis.n_basis - 1), C).alpha_w_plus
        np.testing.assert_allclose(E, ace_bound(spline, L, times).per_time, rtol=1e-12)


class TestAceValue:
    def test_zero_weights(self, setup):
        spline, w_basis, times = setup
        D = compute_lag_integrals(spline, w_basis, times[:3]).matrix
        assert ace_value(D[0], np.zeros(w_basis.n_basis)) == 0

    def test_constant_weight(self, setup):
        spline, w_basis, times = setup
        stz = build_sum_to_zero(w_basis)
        a = phi_to_alpha(np.zeros(w_basis.n_basis - 1), gram_matrix(stz), stz.transform)
        D = compute_lag_integrals(spline, w_basis, times[:5]).matrix
        for i in range(5):
            k = times[i] - spline.basis.knots
            pts = np.unique(k[(k > 0) & (k < L)])
            oracle = quad(lambda l: spline(times[i] - l)[0], 0, L, points=pts, limit=500)[0] / np.sqrt(L)
            np.testing.assert_allclose(ace_value(D[i], a.alpha_w), oracle, rtol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            ace_value(np.ones(5), np.ones(4))

    def test_weighted_exposure_callable(self, setup):
        spline, w_basis, times = setup
        alpha = np.random.default_rng(14).standard_normal(w_basis.n_basis)
        D = compute_lag_integrals(spline, w_basis, times).matrix
        # a spline weight is smooth only between its knots, so compare against the exact matrix loosely
        got = weighted_exposure(spline, lambda l: w_basis(l.ravel(), alpha).reshape(l.shape), L, times, n_nodes=10)
        np.testing.assert_allclose(got, D @ alpha, rtol=1e-4, atol=1e-6)
