"""Cubic B-spline machinery: knots, local basis evaluation, penalties and
natural-cubic interpolation of a daily exposure series."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

DEGREE = 3
ORDER = DEGREE + 1

# 2-point Gauss-Legendre rule on [-1, 1]
_GL2_NODES = np.array([-1.0, 1.0]) / np.sqrt(3.0)
_GL2_WEIGHTS = np.array([1.0, 1.0])


class DomainError(ValueError):
    """Raised when a spline is evaluated outside its boundary."""


@dataclass(frozen=True)
class KnotVector:
    knots: np.ndarray
    boundary: tuple[float, float]
    degree: int = DEGREE

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if np.any(np.diff(k) < 0):
            raise ValueError("knots must be nondecreasing")
        p = self.degree
        lo, hi = self.boundary
        if not (k[p] <= lo < hi <= k[len(k) - p - 1]):
            raise ValueError("boundary must lie inside [knots[p], knots[-p-1]]")
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @property
    def interior(self) -> np.ndarray:
        """Knots lying inside the boundary (inclusive)."""
        lo, hi = self.boundary
        k = self.knots
        return k[(k >= lo) & (k <= hi)]


def build_knots(domain, n_interior: int, placement="equally-spaced") -> KnotVector:
    """Cubic knot vector with equally spaced exterior knots.

    ``placement`` is either ``"equally-spaced"`` (``n_interior`` knots from
    ``lower`` to ``upper`` inclusive) or an explicit sequence of interior knots.
    """
    lower, upper = float(domain[0]), float(domain[1])
    if not lower < upper:
        raise ValueError(f"degenerate domain [{lower}, {upper}]")
    if isinstance(placement, str):
        if placement != "equally-spaced":
            raise ValueError(f"unknown placement {placement!r}")
        if n_interior < 2:
            raise ValueError("need at least 2 interior knots (the two boundary points)")
        inner = np.linspace(lower, upper, n_interior)
    else:
        inner = np.unique(np.asarray(placement, dtype=float))
        if len(inner) == 0:
            raise ValueError("n_interior must be positive")
        inner = np.unique(np.r_[lower, inner[(inner > lower) & (inner < upper)], upper])
    h_lo = inner[1] - inner[0]
    h_hi = inner[-1] - inner[-2]
    left = inner[0] - h_lo * np.arange(DEGREE, 0, -1)
    right = inner[-1] + h_hi * np.arange(1, DEGREE + 1)
    return KnotVector(np.r_[left, inner, right], (lower, upper))


def _find_span(knots: np.ndarray, x: np.ndarray, degree: int) -> np.ndarray:
    m = len(knots)
    span = np.searchsorted(knots, x, side="right") - 1
    lo = degree
    hi = m - degree - 2
    # right boundary belongs to the last nonempty interval
    span = np.clip(span, lo, hi)
    while True:
        empty = knots[span] == knots[span + 1]
        if not empty.any():
            break
        span = np.where(empty, span - 1, span)
    return span


def _local_values(knots, x, span, degree):
    """Nonzero degree-``degree`` B-splines at ``x``; column r is basis span-degree+r."""
    n = len(x)
    N = np.zeros((n, degree + 1))
    N[:, 0] = 1.0
    left = np.zeros((n, degree + 1))
    right = np.zeros((n, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            den = right[:, r + 1] + left[:, j - r]
            with np.errstate(divide="ignore", invalid="ignore"):
                temp = np.where(den != 0.0, N[:, r] / den, 0.0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return N


def _local_derivs(knots, x, span, degree, order):
    """``order``-th derivative of the nonzero degree-``degree`` B-splines.

    Uses the classical two-term recursion that writes the derivative of a
    degree-k function through degree k-1 functions of the same knot vector.
    """
    if order == 0:
        return _local_values(knots, x, span, degree)
    if order > degree:
        return np.zeros((len(x), degree + 1))
    lower = _local_derivs(knots, x, span, degree - 1, order - 1)
    n = len(x)
    padded = np.zeros((n, degree + 2))
    padded[:, 1:degree + 1] = lower
    out = np.empty((n, degree + 1))
    for r in range(degree + 1):
        j = span - degree + r
        d1 = knots[j + degree] - knots[j]
        d2 = knots[j + degree + 1] - knots[j + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = np.where(d1 != 0.0, padded[:, r] / d1, 0.0)
            t2 = np.where(d2 != 0.0, padded[:, r + 1] / d2, 0.0)
        out[:, r] = degree * (t1 - t2)
    return out


@dataclass(frozen=True)
class BSplineBasis:
    knot_vector: KnotVector

    @property
    def knots(self) -> np.ndarray:
        return self.knot_vector.knots

    @property
    def boundary(self) -> tuple[float, float]:
        return self.knot_vector.boundary

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.knot_vector.degree - 1

    def _check(self, x):
        lo, hi = self.boundary
        tol = 1e-10 * max(1.0, abs(lo), abs(hi))
        if np.any(x < lo - tol) or np.any(x > hi + tol) or not np.all(np.isfinite(x)):
            bad = x[(x < lo - tol) | (x > hi + tol) | ~np.isfinite(x)]
            raise DomainError(f"x={bad[:3]} outside boundary [{lo}, {hi}]")

    def span(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return _find_span(self.knots, x, self.knot_vector.degree)

    def local(self, x, deriv: int = 0, span=None, check: bool = True):
        """Return ``(values, first_index)``: the nonzero basis entries and the
        index of the basis function in column 0."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if check:
            self._check(x)
        p = self.knot_vector.degree
        if span is None:
            span = _find_span(self.knots, x, p)
        vals = _local_derivs(self.knots, x, span, p, deriv)
        return vals, span - p

    def design(self, x, deriv: int = 0, check: bool = True) -> np.ndarray:
        """Dense ``len(x) x n_basis`` matrix of basis values or derivatives."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        vals, first = self.local(x, deriv, check=check)
        out = np.zeros((len(x), self.n_basis))
        rows = np.arange(len(x))[:, None]
        cols = first[:, None] + np.arange(vals.shape[1])[None, :]
        out[rows, cols] = vals
        return out

    def __call__(self, x, coef, deriv: int = 0):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        vals, first = self.local(x, deriv)
        cols = first[:, None] + np.arange(vals.shape[1])[None, :]
        return np.sum(vals * np.asarray(coef)[cols], axis=1)


def eval_basis(basis: BSplineBasis, x: float) -> np.ndarray:
    return basis.design(np.array([x]))[0]


def eval_basis_derivative(basis: BSplineBasis, x: float, order: int) -> np.ndarray:
    if order not in (1, 2):
        raise ValueError(f"unsupported derivative order {order}")
    return basis.design(np.array([x]), deriv=order)[0]


@dataclass(frozen=True)
class PenaltyMatrix:
    entries: np.ndarray
    rank_deficiency: int

    @property
    def rank(self) -> int:
        return self.entries.shape[0] - self.rank_deficiency


def second_derivative_penalty(basis: BSplineBasis) -> PenaltyMatrix:
    """Gram matrix of second derivatives over the basis boundary.

    Second derivatives of cubics are linear on each knot span, so a 2-point
    Gauss-Legendre rule per span integrates the products exactly.
    """
    if basis.knot_vector.degree != 3:
        raise ValueError("penalty requires a cubic basis")
    lo, hi = basis.boundary
    brk = np.unique(np.r_[lo, basis.knots[(basis.knots > lo) & (basis.knots < hi)], hi])
    a, b = brk[:-1], brk[1:]
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    x = (mid[:, None] + half[:, None] * _GL2_NODES[None, :]).ravel()
    w = (half[:, None] * _GL2_WEIGHTS[None, :]).ravel()
    spans = np.repeat(basis.span(mid), 2)
    vals, first = basis.local(x, deriv=2, span=spans)
    d = basis.n_basis
    S = np.zeros((d, d))
    cols = first[:, None] + np.arange(4)[None, :]
    contrib = w[:, None, None] * vals[:, :, None] * vals[:, None, :]
    np.add.at(S, (cols[:, :, None], cols[:, None, :]), contrib)
    S = 0.5 * (S + S.T)
    return PenaltyMatrix(S, 2)


@dataclass(frozen=True)
class ExposureSpline:
    basis: BSplineBasis
    coefficients: np.ndarray
    observed_range: tuple[float, float]
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def __call__(self, s, deriv: int = 0):
        return self.basis(s, self.coefficients, deriv=deriv)

    @property
    def domain(self) -> tuple[float, float]:
        return self.basis.boundary


AUX_OFFSET = 1.0


def exposure_knots(n: int, start: float = 1.0, c: float = AUX_OFFSET) -> KnotVector:
    """Knots at ``t - 0.5`` for daily times ``t = start..start+n-1`` plus the
    collapsed auxiliary knots at distance ``c`` beyond each end."""
    inner = start - 0.5 + np.arange(n, dtype=float)
    k = np.r_[inner[0] - c - 1.0, np.full(3, inner[0] - c), inner,
              np.full(3, inner[-1] + c), inner[-1] + c + 1.0]
    return KnotVector(k, (inner[0] - c, inner[-1] + c))


def interpolate_exposure(times, values, c: float = AUX_OFFSET) -> ExposureSpline:
    """Natural cubic interpolant of a gap-free daily series.

    The value at day ``t`` is placed at ``t - 0.5``. The padded design has one
    interpolation row per observation and, on each auxiliary span, two rows
    forcing the second derivative to vanish so the spline continues linearly.
    The square banded system is solved through the banded Cholesky factor of
    its normal equations.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != x.shape:
        raise ValueError("times and values must be 1-d arrays of equal length")
    if len(t) < 4:
        raise ValueError("need at least 4 observations")
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise ValueError(f"missing or non-finite exposure at position {bad}")
    step = np.diff(t)
    if np.any(step <= 0):
        raise ValueError("times must be strictly increasing")
    if not np.allclose(step, 1.0):
        raise ValueError("exposure times must be equally spaced daily (no gaps)")
    n = len(t)
    kv = exposure_knots(n, start=t[0], c=c)
    basis = BSplineBasis(kv)
    tau = kv.knots
    inner = tau[4:n + 4]
    lo_aux, hi_aux = kv.boundary
    pts = np.r_[inner, inner[0], 0.5 * (lo_aux + inner[0]), inner[-1], 0.5 * (inner[-1] + hi_aux)]
    deriv = np.r_[np.zeros(n, dtype=int), 2, 2, 2, 2]
    rhs = np.r_[x, 0.0, 0.0, 0.0, 0.0]

    spans = basis.span(pts)
    # second-derivative rows on the right boundary use the inner piece
    spans[n + 2] = spans[n - 1] if spans[n + 2] > spans[n - 1] else spans[n + 2]
    rows = np.empty((len(pts), 4))
    for order in (0, 2):
        sel = deriv == order
        rows[sel] = _local_derivs(tau, pts[sel], spans[sel], 3, order)
    first = spans - 3

    d = basis.n_basis
    # upper banded storage: ab[3 + i - j, j] = A[i, j] for i <= j
    ab = np.zeros((4, d))
    bvec = np.zeros(d)
    for r in range(4):
        np.add.at(bvec, first + r, rows[:, r] * rhs)
        for s in range(r, 4):
            np.add.at(ab[3 - (s - r)], first + s, rows[:, r] * rows[:, s])
    coef = solveh_banded(ab, bvec, lower=False, check_finite=False)
    coef.setflags(write=False)
    return ExposureSpline(basis, coef, (float(inner[0]), float(inner[-1])), t, x)
