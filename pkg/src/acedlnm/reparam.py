"""Sum-to-zero transform of the lag-weight basis and the unit-norm
parameterization of the weight coefficients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .splines import BSplineBasis

_GL4_NODES, _GL4_WEIGHTS = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True)
class SumToZeroBasis:
    """Transformed basis ``B @ transform``: a constant function followed by
    ``d - 1`` functions summing to zero over the partition points."""

    basis: BSplineBasis
    transform: np.ndarray
    n_points: int

    @property
    def n_basis(self) -> int:
        return self.basis.n_basis

    @property
    def partition(self) -> np.ndarray:
        lo, hi = self.basis.boundary
        return lo + (np.arange(self.n_points) + 0.5) * (hi - lo) / self.n_points

    def design(self, lags, deriv: int = 0) -> np.ndarray:
        return self.basis.design(lags, deriv) @ self.transform


def build_sum_to_zero(w_basis: BSplineBasis, J: int = 1000) -> SumToZeroBasis:
    d = w_basis.n_basis
    if J < d:
        raise ValueError(f"partition size J={J} smaller than basis dimension {d}")
    stz = SumToZeroBasis(w_basis, np.eye(d), J)
    B = w_basis.design(stz.partition)
    colsum = B.sum(axis=0)
    q, _ = np.linalg.qr(colsum[:, None], mode="complete")
    transform = np.column_stack([np.ones(d), q[:, 1:]])
    return SumToZeroBasis(w_basis, transform, J)


def basis_gram(basis: BSplineBasis) -> np.ndarray:
    """Exact Gram matrix of the basis functions over the boundary interval."""
    lo, hi = basis.boundary
    k = basis.knots
    brk = np.unique(np.r_[lo, k[(k > lo) & (k < hi)], hi])
    mid = 0.5 * (brk[:-1] + brk[1:])
    half = 0.5 * (brk[1:] - brk[:-1])
    x = (mid[:, None] + half[:, None] * _GL4_NODES[None, :]).ravel()
    w = (half[:, None] * _GL4_WEIGHTS[None, :]).ravel()
    spans = np.repeat(basis.span(mid), 4)
    vals, first = basis.local(x, span=spans)
    B = np.zeros((len(x), basis.n_basis))
    B[np.arange(len(x))[:, None], first[:, None] + np.arange(4)] = vals
    G = B.T @ (w[:, None] * B)
    return 0.5 * (G + G.T)


def gram_matrix(stz: SumToZeroBasis) -> np.ndarray:
    G = stz.transform.T @ basis_gram(stz.basis) @ stz.transform
    return 0.5 * (G + G.T)


@dataclass(frozen=True)
class ConstrainedWeights:
    alpha_w_plus: np.ndarray
    alpha_w: np.ndarray


def _norm_sq(phi, C):
    phi_l = np.r_[1.0, np.asarray(phi, dtype=float)]
    Cp = C @ phi_l
    s = phi_l @ Cp
    if not s > 0:
        raise ArithmeticError("degenerate weight normalization")
    return phi_l, Cp, s


def phi_to_alpha(phi, C, transform=None) -> ConstrainedWeights:
    """Unit-norm weight coefficients from free parameters ``phi``."""
    phi_l, _, s = _norm_sq(phi, C)
    a = phi_l / np.sqrt(s)
    alpha = a if transform is None else transform @ a
    return ConstrainedWeights(a, alpha)


def reparam_jacobian(phi, C) -> np.ndarray:
    """Derivative of the transformed coefficients with respect to ``phi``."""
    phi_l, Cp, s = _norm_sq(phi, C)
    full = np.eye(len(phi_l)) / np.sqrt(s) - np.outer(phi_l, Cp) / s ** 1.5
    return full[:, 1:]


def reparam_contract(phi, C, r) -> np.ndarray:
    """Sum over i of ``r[i]`` times the Hessian of coefficient i with respect to ``phi``."""
    phi_l, Cp, s = _norm_sq(phi, C)
    r = np.asarray(r, dtype=float)
    rp = r @ phi_l
    M = (-(np.outer(r, Cp) + np.outer(Cp, r)) / s ** 1.5 - rp * C / s ** 1.5
         + 3.0 * rp * np.outer(Cp, Cp) / s ** 2.5)
    return M[1:, 1:]


def weight_integrals(stz: SumToZeroBasis, alpha_plus, n_nodes: int = 8):
    """Quadrature values of the integral of w^2 and of w over [0, L]."""
    basis = stz.basis
    lo, hi = basis.boundary
    k = basis.knots
    brk = np.unique(np.r_[lo, k[(k > lo) & (k < hi)], hi])
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    mid = 0.5 * (brk[:-1] + brk[1:])
    half = 0.5 * (brk[1:] - brk[:-1])
    x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    vals = stz.design(x) @ np.asarray(alpha_plus)
    return float(w @ vals ** 2), float(w @ vals)
