import time

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.linalg import solve_banded

from acedlnm.splines import (
    BSplineBasis,
    DomainError,
    KnotVector,
    build_knots,
    eval_basis,
    eval_basis_derivative,
    exposure_knots,
    interpolate_exposure,
    second_derivative_penalty,
)


def cox_de_boor(knots, i, p, x):
    """Textbook recursion with half-open spans; the last nonempty span is closed."""
    if p == 0:
        last = np.flatnonzero(knots < knots[-1])[-1]
        if knots[i] <= x < knots[i + 1]:
            return 1.0
        return 1.0 if (i == last and x == knots[i + 1]) else 0.0
    out = 0.0
    if knots[i + p] > knots[i]:
        out += (x - knots[i]) / (knots[i + p] - knots[i]) * cox_de_boor(knots, i, p - 1, x)
    if knots[i + p + 1] > knots[i + 1]:
        out += (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1]) * cox_de_boor(knots, i + 1, p - 1, x)
    return out


def random_basis(rng, n_inner=None):
    n_inner = n_inner or int(rng.integers(4, 12))
    inner = np.sort(rng.uniform(-5, 5, n_inner))
    return BSplineBasis(build_knots((inner[0], inner[-1]), 0, placement=inner))


def natural_spline_oracle(t, x, s):
    """Natural cubic interpolant at points ``s`` from the tridiagonal system in
    the second derivatives (unit spacing)."""
    n = len(x)
    rhs = x[2:] - 2 * x[1:-1] + x[:-2]
    ab = np.zeros((3, n - 2))
    ab[0, 1:] = 1 / 6
    ab[1] = 4 / 6
    ab[2, :-1] = 1 / 6
    m = np.zeros(n)
    m[1:-1] = solve_banded((1, 1), ab, rhs)
    k = np.clip(np.floor(s - t[0]).astype(int), 0, n - 2)
    a = s - t[k]
    b = 1 - a
    return b * x[k] + a * x[k + 1] - a * b / 6 * ((1 + b) * m[k] + (1 + a) * m[k + 1])


class TestKnots:
    def test_equally_spaced_interior(self):
        kv = build_knots((0, 14), 8)
        np.testing.assert_allclose(kv.interior, np.arange(0, 15, 2))
        assert kv.boundary == (0.0, 14.0)
        assert BSplineBasis(kv).n_basis == len(kv.knots) - 4

    def test_symmetric_exposure_domain(self):
        kv = build_knots((-94, 94), 20)
        assert kv.interior[0] == -94 and kv.interior[-1] == 94

    def test_exposure_auxiliary_knots(self):
        kv = exposure_knots(10)
        k = kv.knots
        np.testing.assert_allclose(k[4:14], np.arange(1, 11) - 0.5)
        c = 1.0
        assert k[1] == k[2] == k[3] == k[4] - c
        assert k[0] == k[4] - c - 1
        assert k[14] == k[15] == k[16] == k[13] + c
        assert k[17] == k[13] + c + 1

    @pytest.mark.parametrize("domain,n", [((1, 1), 5), ((2, 1), 5), ((0, 1), 0)])
    def test_invalid(self, domain, n):
        with pytest.raises(ValueError):
            build_knots(domain, n)

    def test_knots_must_be_sorted(self):
        with pytest.raises(ValueError):
            KnotVector(np.array([0, 1, 3, 2, 4, 5, 6, 7, 8.0]), (3, 5))


class TestBasis:
    def test_partition_of_unity(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            b = random_basis(rng)
            x = rng.uniform(*b.boundary, 1000)
            B = b.design(x)
            np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
            assert np.all(B >= 0)
            assert np.all((B != 0).sum(axis=1) <= 4)

    def test_collapsed_auxiliary_knot(self):
        b = BSplineBasis(exposure_knots(12))
        v = eval_basis(b, b.knots[1])
        np.testing.assert_array_equal(v, np.eye(b.n_basis)[0])

    def test_matches_cox_de_boor(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            b = random_basis(rng)
            x = rng.uniform(*b.boundary)
            oracle = [cox_de_boor(b.knots, i, 3, x) for i in range(b.n_basis)]
            np.testing.assert_allclose(eval_basis(b, x), oracle, atol=1e-12)

    def test_out_of_domain(self):
        b = BSplineBasis(build_knots((0, 1), 5))
        with pytest.raises(DomainError):
            eval_basis(b, 1.5)
        with pytest.raises(DomainError):
            eval_basis_derivative(b, -0.1, 1)

    def test_unsupported_order(self):
        b = BSplineBasis(build_knots((0, 1), 5))
        with pytest.raises(ValueError):
            eval_basis_derivative(b, 0.5, 3)

    def test_derivatives_against_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            b = random_basis(rng)
            lo, hi = b.boundary
            x = rng.uniform(lo + 0.01 * (hi - lo), hi - 0.01 * (hi - lo))
            if np.min(np.abs(b.knots - x)) < 1e-3:
                continue
            d1 = eval_basis_derivative(b, x, 1)
            d2 = eval_basis_derivative(b, x, 2)
            assert abs(d1.sum()) < 1e-10
            h = 1e-6
            fd1 = (eval_basis(b, x + h) - eval_basis(b, x - h)) / (2 * h)
            np.testing.assert_allclose(d1, fd1, rtol=1e-5, atol=1e-5 * np.abs(d1).max())
            h = 1e-4
            fd2 = (eval_basis(b, x + h) - 2 * eval_basis(b, x) + eval_basis(b, x - h)) / h ** 2
            np.testing.assert_allclose(d2, fd2, rtol=1e-4, atol=1e-4 * np.abs(d2).max())


class TestPenalty:
    def test_null_space_and_symmetry(self):
        b = BSplineBasis(build_knots((0, 15), 12))
        P = second_derivative_penalty(b)
        S = P.entries
        assert np.max(np.abs(S - S.T)) == 0
        # coefficients of a + b x are the Greville abscissae
        grev = np.array([b.knots[i + 1:i + 4].mean() for i in range(b.n_basis)])
        for v in (np.ones(b.n_basis), grev, 3 - 0.5 * grev):
            assert abs(v @ S @ v) < 1e-10 * np.abs(S).max()
        assert P.rank == b.n_basis - 2
        ev = np.linalg.eigvalsh(S)
        assert ev.min() >= -1e-10 * ev.max()

    def test_matches_quadrature(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            b = random_basis(rng)
            v = rng.standard_normal(b.n_basis)
            S = second_derivative_penalty(b).entries
            lo, hi = b.boundary
            brk = np.unique(np.r_[lo, b.knots[(b.knots > lo) & (b.knots < hi)], hi])
            oracle = sum(quad(lambda x: b(x, v, deriv=2)[0] ** 2, a, c, epsabs=0, epsrel=1e-12)[0]
                         for a, c in zip(brk[:-1], brk[1:]))
            np.testing.assert_allclose(v @ S @ v, oracle, rtol=1e-8)


class TestInterpolation:
    def test_constant_series(self):
        t = np.arange(1.0, 51.0)
        s = interpolate_exposure(t, np.full(50, 3.7))
        np.testing.assert_allclose(s(t - 0.5), 3.7, atol=1e-8)
        np.testing.assert_allclose(s(np.linspace(*s.domain, 333)), 3.7, atol=1e-8)

    def test_exact_at_observations(self):
        rng = np.random.default_rng(5)
        x = rng.lognormal(2, 0.6, 800)
        t = np.arange(1.0, 801.0)
        s = interpolate_exposure(t, x)
        assert np.max(np.abs(s(t - 0.5) - x)) < 1e-8

    def test_matches_natural_spline_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(10, 3, 200)
        t = np.arange(1.0, 201.0)
        s = interpolate_exposure(t, x)
        mid = t[:-1]
        np.testing.assert_allclose(s(mid), natural_spline_oracle(t - 0.5, x, mid), atol=1e-7)
        q = rng.uniform(0.5, 199.5, 500)
        np.testing.assert_allclose(s(q), natural_spline_oracle(t - 0.5, x, q), atol=1e-7)

    def test_linear_continuation_beyond_data(self):
        rng = np.random.default_rng(7)
        t = np.arange(1.0, 41.0)
        s = interpolate_exposure(t, rng.normal(size=40))
        lo, hi = s.domain
        edge = np.r_[np.linspace(lo, 0.5, 7), np.linspace(39.5, hi, 7)]
        np.testing.assert_allclose(s(edge, deriv=2), 0.0, atol=1e-9)

    def test_collinear_data_have_zero_roughness(self):
        t = np.arange(1.0, 101.0)
        s = interpolate_exposure(t, 2.0 + 0.3 * t)
        S = second_derivative_penalty(s.basis).entries
        v = s.coefficients
        assert abs(v @ S @ v) < 1e-10

    def test_long_series_fast(self):
        rng = np.random.default_rng(8)
        n = 6574
        x = rng.lognormal(2, 0.5, n)
        t = np.arange(1.0, n + 1.0)
        interpolate_exposure(t, x)
        start = time.perf_counter()
        s = interpolate_exposure(t, x)
        assert time.perf_counter() - start < 0.1
        assert np.max(np.abs(s(t - 0.5) - x)) < 1e-8

    @pytest.mark.parametrize("t,x", [
        (np.array([1.0, 3.0, 2.0, 4.0, 5.0]), np.ones(5)),
        (np.array([1.0, 2.0, 4.0, 5.0, 6.0]), np.ones(5)),
        (np.arange(1.0, 6.0), np.array([1.0, np.nan, 1.0, 1.0, 1.0])),
        (np.arange(1.0, 4.0), np.ones(3)),
    ])
    def test_invalid_series(self, t, x):
        with pytest.raises(ValueError):
            interpolate_exposure(t, x)
