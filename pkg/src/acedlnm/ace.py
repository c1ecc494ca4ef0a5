"""Exact lag integrals of weight-basis functions against the interpolated
exposure, and the Cauchy-Schwarz bound on the cumulative exposure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import BSplineBasis, ExposureSpline, _local_derivs

# Four equispaced nodes on [-1, 1]; a cubic on a span is determined by its values there.
_NODES = -1.0 + 2.0 * np.arange(4) / 3.0
_VANDER = _NODES[:, None] ** np.arange(4)[None, :]
_MOMENTS = np.array([[(1.0 + (-1.0) ** (i + j)) / (i + j + 1) for j in range(4)] for i in range(4)])
_VANDER_INV = np.linalg.inv(_VANDER)
# values-to-integral form: integral over [-1,1] of p*q = p_vals' W q_vals
PRODUCT_WEIGHTS = _VANDER_INV.T @ _MOMENTS @ _VANDER_INV

_GL4_NODES, _GL4_WEIGHTS = np.polynomial.legendre.leggauss(4)


def moment_matrix() -> np.ndarray:
    """Integrals of monomial products over [-1, 1]."""
    return _MOMENTS.copy()


@dataclass(frozen=True)
class LagBasisIntegrals:
    matrix: np.ndarray
    times: np.ndarray
    max_lag: float


@dataclass(frozen=True)
class AceBound:
    e_bar: float
    per_time: np.ndarray

    @property
    def rounded(self) -> float:
        """Bound rounded up to an integer, used for placing f-knots."""
        return float(np.ceil(self.e_bar))


@dataclass(frozen=True)
class _Partition:
    left: np.ndarray
    right: np.ndarray

    @property
    def mid(self):
        return 0.5 * (self.left + self.right)

    @property
    def half(self):
        return 0.5 * (self.right - self.left)

    def points(self, nodes):
        return self.mid[:, None] + self.half[:, None] * nodes[None, :]


def _check_times(exposure: ExposureSpline, L: float, times: np.ndarray):
    lo, hi = exposure.domain
    tol = 1e-9
    bad = (times - L < lo - tol) | (times > hi + tol)
    if np.any(bad):
        raise ValueError(
            f"exposure spline on [{lo}, {hi}] does not cover the lag window of "
            f"{int(bad.sum())} requested times (first t={times[bad][0]}); drop the first ceil(L) times"
        )


def _lag_partition(exposure: ExposureSpline, breaks: np.ndarray, L: float, t: float) -> _Partition:
    ek = exposure.basis.knots
    lags = t - ek
    lags = lags[(lags > 0.0) & (lags < L)]
    pts = np.unique(np.r_[0.0, breaks, lags, L])
    pts = pts[(pts >= 0.0) & (pts <= L)]
    # merge breakpoints closer than round-off
    keep = np.r_[True, np.diff(pts) > 1e-12 * max(1.0, L)]
    pts = pts[keep]
    pts[-1] = L
    return _Partition(pts[:-1], pts[1:])


def _groups(exposure: ExposureSpline, times: np.ndarray):
    """Group times whose lag partitions coincide (same offset to the exposure knot grid)."""
    origin = exposure.basis.knots[4]
    frac = np.round(np.mod(times - origin, 1.0), 10)
    frac[frac == 1.0] = 0.0
    keys, inverse = np.unique(frac, return_inverse=True)
    return [np.flatnonzero(inverse == g) for g in range(len(keys))]


class ExposurePieces:
    """Power-series coefficients of every polynomial piece of the exposure spline,
    in local coordinates ``s - left`` of each knot span."""

    def __init__(self, exposure: ExposureSpline):
        basis = exposure.basis
        k = basis.knots
        nb = basis.n_basis
        spans = np.arange(3, nb)
        spans = spans[k[spans + 1] > k[spans]]
        left = k[spans]
        coef = np.zeros((len(spans), 4))
        fact = np.array([1.0, 1.0, 2.0, 6.0])
        cols = (spans - 3)[:, None] + np.arange(4)[None, :]
        c = exposure.coefficients[cols]
        for order in range(4):
            vals = _local_derivs(k, left, spans, 3, order)
            coef[:, order] = np.sum(vals * c, axis=1) / fact[order]
        self.left = left
        self.right = k[spans + 1]
        self.coef = coef

    def locate(self, s):
        idx = np.searchsorted(self.left, s, side="right") - 1
        return np.clip(idx, 0, len(self.left) - 1)

    def evaluate(self, s, piece):
        z = s - self.left[piece]
        c = self.coef[piece]
        return ((c[..., 3] * z + c[..., 2]) * z + c[..., 1]) * z + c[..., 0]


def _w_local(w_basis: BSplineBasis, part: _Partition):
    """W-basis values at the 4 nodes of each lag sub-span, span fixed by the midpoint."""
    pts = part.points(_NODES)
    spans = w_basis.span(part.mid)
    vals = _local_derivs(w_basis.knots, pts.ravel(), np.repeat(spans, 4), 3, 0)
    return vals.reshape(len(part.left), 4, 4), spans - 3


def _x_nodes(exposure, pieces, part, t_group, naive):
    """Exposure at t - l for the 4 nodes of each sub-span: array (n_t, n_span, 4)."""
    pts = part.points(_NODES)
    s = t_group[:, None, None] - pts[None, :, :]
    s_mid = t_group[:, None] - part.mid[None, :]
    if naive:
        basis = exposure.basis
        spans = np.broadcast_to(basis.span(s_mid.ravel()).reshape(s_mid.shape)[:, :, None], s.shape)
        vals = _local_derivs(basis.knots, s.ravel(), spans.ravel(), 3, 0)
        cols = (spans.ravel() - 3)[:, None] + np.arange(4)[None, :]
        return np.sum(vals * exposure.coefficients[cols], axis=1).reshape(s.shape)
    piece = pieces.locate(s_mid)[:, :, None]
    return pieces.evaluate(s, np.broadcast_to(piece, s.shape))


def compute_lag_integrals(exposure: ExposureSpline, w_basis: BSplineBasis, times,
                          naive: bool = False) -> LagBasisIntegrals:
    """Matrix of exact integrals of each w-basis function against X(t - l) over [0, L].

    ``naive=True`` evaluates the exposure at the nodes by direct basis evaluation
    instead of the precomputed span polynomials.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    lo, L = w_basis.boundary
    if lo != 0.0:
        raise ValueError("w-basis must be defined on [0, L]")
    _check_times(exposure, L, times)
    pieces = None if naive else ExposurePieces(exposure)
    wk = w_basis.knots
    breaks = wk[(wk > 0.0) & (wk < L)]
    D = np.zeros((len(times), w_basis.n_basis))
    for idx in _groups(exposure, times):
        part = _lag_partition(exposure, breaks, L, times[idx[0]])
        wvals, first = _w_local(w_basis, part)
        xvals = _x_nodes(exposure, pieces, part, times[idx], naive)
        # (n_t, span, local q)
        contrib = np.einsum("tsi,ij,sjq->tsq", xvals, PRODUCT_WEIGHTS, wvals) * part.half[None, :, None]
        cols = first[:, None] + np.arange(4)[None, :]
        scatter = np.zeros((cols.size, w_basis.n_basis))
        scatter[np.arange(cols.size), cols.ravel()] = 1.0
        D[idx] = contrib.reshape(len(idx), -1) @ scatter
    return LagBasisIntegrals(D, times, float(L))


def ace_bound(exposure: ExposureSpline, L: float, times) -> AceBound:
    """Per-time L2 norm of the exposure over the lag window, and its maximum."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    _check_times(exposure, L, times)
    pieces = ExposurePieces(exposure)
    out = np.empty(len(times))
    for idx in _groups(exposure, times):
        part = _lag_partition(exposure, np.empty(0), L, times[idx[0]])
        pts = part.points(_GL4_NODES)
        s = times[idx][:, None, None] - pts[None]
        piece = pieces.locate(times[idx][:, None] - part.mid[None, :])[:, :, None]
        xv = pieces.evaluate(s, np.broadcast_to(piece, s.shape))
        out[idx] = np.einsum("tsi,i,s->t", xv ** 2, _GL4_WEIGHTS, part.half)
    per_time = np.sqrt(out)
    return AceBound(float(per_time.max()), per_time)


def ace_value(row, alpha_w) -> float:
    row = np.asarray(row, dtype=float)
    alpha_w = np.asarray(alpha_w, dtype=float)
    if row.shape[-1] != alpha_w.shape[0]:
        raise ValueError(f"dimension mismatch: D row has {row.shape[-1]} entries, weights {alpha_w.shape[0]}")
    return row @ alpha_w


def weighted_exposure(exposure: ExposureSpline, weight, L: float, times, n_nodes: int = 8) -> np.ndarray:
    """Integral of ``weight(l) X(t - l)`` over [0, L] for an arbitrary smooth callable,
    by Gauss-Legendre on the exposure-knot partition. Used to produce true ACE values."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    _check_times(exposure, L, times)
    pieces = ExposurePieces(exposure)
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    out = np.empty(len(times))
    for idx in _groups(exposure, times):
        part = _lag_partition(exposure, np.empty(0), L, times[idx[0]])
        pts = part.points(nodes)
        wv = weight(pts)
        s = times[idx][:, None, None] - pts[None]
        piece = pieces.locate(times[idx][:, None] - part.mid[None, :])[:, :, None]
        xv = pieces.evaluate(s, np.broadcast_to(piece, s.shape))
        out[idx] = np.einsum("tsi,si,i,s->t", xv, wv, weights, part.half)
    return out
