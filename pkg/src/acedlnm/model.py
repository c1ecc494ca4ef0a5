"""Model specification, data preparation and the penalized log-likelihood
with its analytic gradient and Hessian.

Parameters are stacked as ``u = [phi, alpha_f, beta]`` where ``phi`` are the
free lag-weight parameters (absent for fixed weights), ``alpha_f`` the
coefficients of the response function f and ``beta`` the covariate
coefficients. Hyperparameters are ``rho = [log lambda..., log theta]`` with
one smoothing parameter per penalty in :attr:`PreparedModel.penalties` order.

:meth:`PreparedModel.evaluate` works on plain arrays and on dual numbers, so
the same code gives directional derivatives in ``u`` and ``rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dual as dl
from .ace import AceBound, ace_bound, compute_lag_integrals
from .nbinom import eta_terms
from .reparam import build_sum_to_zero, gram_matrix
from .splines import BSplineBasis, ExposureSpline, build_knots, interpolate_exposure, second_derivative_penalty


@dataclass(frozen=True)
class SmoothTerm:
    name: str
    n_knots: int = 10


@dataclass(frozen=True)
class ModelSpec:
    max_lag: float = 15.0
    n_knots_w: int = 20
    n_knots_f: int = 20
    smooth: tuple = ()
    linear: tuple = ()
    stz_points: int = 1000

    def __post_init__(self):
        if not self.max_lag > 0:
            raise ValueError("max_lag must be positive")
        object.__setattr__(self, "smooth", tuple(
            s if isinstance(s, SmoothTerm) else SmoothTerm(*s) if isinstance(s, (tuple, list)) else SmoothTerm(s)
            for s in self.smooth))
        object.__setattr__(self, "linear", tuple(self.linear))


@dataclass
class Penalty:
    name: str
    matrix: np.ndarray
    index: slice           # location inside u (or inside the weight coefficients for "w")
    rank: int
    log_pdet: float        # sum of log positive eigenvalues
    root: np.ndarray       # rank x d with root.T @ root == matrix
    eigvals: np.ndarray
    eigvecs: np.ndarray

    def quadratic(self, v):
        """v' S v as a sum of squares: free of the cancellation that makes the
        direct form inaccurate when v is close to the null space and lambda is large."""
        r = dl.matmul(self.root, v)
        return dl.matmul(r, r)


def _penalty(name, S, index):
    S = 0.5 * (S + S.T)
    ev, V = np.linalg.eigh(S)
    pos = ev > 1e-10 * max(ev.max(), 1e-300)
    root = np.sqrt(ev[pos])[:, None] * V[:, pos].T
    return Penalty(name, S, index, int(pos.sum()), float(np.sum(np.log(ev[pos]))), root,
                   np.where(pos, ev, 0.0), V)


@dataclass
class CovariateSmooth:
    name: str
    basis: BSplineBasis
    centering: np.ndarray     # d x (d - 1)

    def design(self, z) -> np.ndarray:
        return self.basis.design(z) @ self.centering


def build_covariate_smooth(name, z, n_knots):
    z = np.asarray(z, dtype=float)
    lo, hi = float(z.min()), float(z.max())
    if not lo < hi:
        raise ValueError(f"covariate {name!r} is constant")
    basis = BSplineBasis(build_knots((lo, hi), n_knots))
    B = basis.design(z)
    q, _ = np.linalg.qr(B.sum(axis=0)[:, None], mode="complete")
    Zc = q[:, 1:]
    S = Zc.T @ second_derivative_penalty(basis).entries @ Zc
    return CovariateSmooth(name, basis, Zc), B @ Zc, S


def discrete_weights(kind) -> np.ndarray:
    """Lag weights on lags 0..K with unit Euclidean norm.

    ``kind`` is ``"lag0"``, ``"avgA-B"`` (equal weights on lags A..B) or a
    sequence of weights starting at lag 0.
    """
    if isinstance(kind, str):
        k = kind.strip().lower()
        if k.startswith("lag") and k[3:].isdigit():
            lag = int(k[3:])
            w = np.zeros(lag + 1)
            w[lag] = 1.0
        elif k.startswith("avg"):
            body = k[3:].replace("lag", "")
            try:
                a, b = (int(p) for p in body.split("-"))
            except ValueError:
                raise ValueError(f"cannot parse fixed weights {kind!r}") from None
            if a < 0 or b < a:
                raise ValueError(f"invalid lag window in {kind!r}")
            w = np.zeros(b + 1)
            w[a:] = 1.0
        else:
            raise ValueError(f"cannot parse fixed weights {kind!r}")
    else:
        w = np.asarray(kind, dtype=float)
        if w.ndim != 1 or len(w) == 0 or not np.all(np.isfinite(w)):
            raise ValueError("weights must be a finite 1-d sequence")
    norm = np.linalg.norm(w)
    if norm == 0 or w.sum() <= 0:
        raise ValueError("weights must have positive sum")
    return w / norm


@dataclass
class DataSet:
    """Daily series: ``times`` are consecutive integers."""
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        n = len(self.times)
        if self.y.shape != (n,) or self.x.shape != (n,):
            raise ValueError("times, y and x must have equal length")
        self.covariates = {k: np.asarray(v, dtype=float) for k, v in self.covariates.items()}
        for k, v in self.covariates.items():
            if v.shape != (n,):
                raise ValueError(f"covariate {k!r} has wrong length")


class PreparedModel:
    """Everything fixed for a given data set and specification."""

    def __init__(self, spec: ModelSpec, data: DataSet, fixed_weights=None):
        self.spec = spec
        self.data = data
        L = float(spec.max_lag)
        first = data.times[0] + math.ceil(L)
        rows = np.flatnonzero(data.times >= first)
        if len(rows) == 0:
            raise ValueError("no observation has a complete lag window")
        self.rows = rows
        self.times = data.times[rows]
        self.y = data.y[rows]
        if np.any(self.y < 0) or np.any(self.y != np.round(self.y)):
            raise ValueError("response must be nonnegative integer counts")
        self.free_w = fixed_weights is None
        self.exposure: ExposureSpline = interpolate_exposure(data.times, data.x)

        penalties = []
        if self.free_w:
            self.w_basis = BSplineBasis(build_knots((0.0, L), spec.n_knots_w))
            self.stz = build_sum_to_zero(self.w_basis, spec.stz_points)
            Z = self.stz.transform
            self.lag_integrals = compute_lag_integrals(self.exposure, self.w_basis, self.times).matrix
            self.Dp = self.lag_integrals @ Z
            self.C = gram_matrix(self.stz)
            Sw = second_derivative_penalty(self.w_basis).entries
            self.Sw_plus = Z.T @ Sw @ Z
            self.bound: AceBound = ace_bound(self.exposure, L, self.times)
            e_bar = self.bound.rounded
            self.n_phi = self.w_basis.n_basis - 1
            penalties.append(_penalty("w", self.Sw_plus, slice(0, self.w_basis.n_basis)))
            self.fixed = None
        else:
            w = discrete_weights(fixed_weights)
            if len(w) - 1 > L:
                raise ValueError("fixed-weight window longer than the maximum lag")
            self.fixed = w
            idx = rows[:, None] - np.arange(len(w))[None, :]
            window = data.x[idx]
            self.E_fixed = window @ w
            per_time = np.sqrt(np.sum(window ** 2, axis=1))
            self.bound = AceBound(float(per_time.max()), per_time)
            e_bar = self.bound.rounded
            self.n_phi = 0
        if e_bar <= 0:
            raise ValueError("exposure is identically zero")
        self.f_basis = BSplineBasis(build_knots((-e_bar, e_bar), spec.n_knots_f))
        self.n_f = self.f_basis.n_basis
        off = self.n_phi
        penalties.append(_penalty("f", second_derivative_penalty(self.f_basis).entries, slice(off, off + self.n_f)))
        off += self.n_f

        blocks = []
        self.smooths = []
        for term in spec.smooth:
            if term.name not in data.covariates:
                raise KeyError(f"missing covariate {term.name!r}")
            sm, X, S = build_covariate_smooth(term.name, data.covariates[term.name][rows], term.n_knots)
            self.smooths.append(sm)
            blocks.append(X)
            penalties.append(_penalty(f"h:{term.name}", S, slice(off, off + X.shape[1])))
            off += X.shape[1]
        self.linear_names = list(spec.linear)
        for name in spec.linear:
            if name not in data.covariates:
                raise KeyError(f"missing covariate {name!r}")
            blocks.append(data.covariates[name][rows][:, None])
            off += 1
        self.Xh = np.column_stack(blocks) if blocks else np.zeros((len(rows), 0))
        self.n_beta = self.Xh.shape[1]
        self.n_u = off
        self.penalties = penalties
        self.n_rho = len(penalties) + 1

        # the beta-block penalty as one matrix with lambda placeholders
        self._h_pen = [(p, slice(p.index.start - self.n_phi - self.n_f, p.index.stop - self.n_phi - self.n_f))
                       for p in penalties if p.name.startswith("h:")]

    # ------------------------------------------------------------------ layout
    @property
    def phi_slice(self):
        return slice(0, self.n_phi)

    @property
    def f_slice(self):
        return slice(self.n_phi, self.n_phi + self.n_f)

    @property
    def beta_slice(self):
        return slice(self.n_phi + self.n_f, self.n_u)

    @property
    def gamma_slice(self):
        return slice(self.n_phi, self.n_u)

    def split(self, u):
        return u[self.phi_slice], u[self.f_slice], u[self.beta_slice]

    def penalty_names(self):
        return [p.name for p in self.penalties]

    # ------------------------------------------------------------ weights
    def weight_coefficients(self, phi):
        """Transformed weight coefficients, their Jacobian and the pieces
        needed for second derivatives. Works for dual ``phi``."""
        ones = np.ones(1)
        phi_l = dl.concatenate([ones, phi])
        Cp = dl.matmul(self.C, phi_l)
        s = dl.matmul(phi_l, Cp)
        rs = 1.0 / dl.sqrt(s)
        a = phi_l * rs
        return phi_l, Cp, s, rs, a

    def exposure_values(self, phi):
        if not self.free_w:
            return self.E_fixed
        return dl.matmul(self.Dp, self.weight_coefficients(phi)[4])

    def f_design(self, E, deriv=0):
        if isinstance(E, dl.Dual):
            v = self.f_basis.design(E.v, deriv)
            d = self.f_basis.design(E.v, deriv + 1)[:, :, None] * E.d[:, None, :]
            return dl.Dual(v, d)
        return self.f_basis.design(E, deriv)

    def knots_covered(self, phi) -> int:
        """Number of interior f-knots inside the range of the exposure values."""
        E = dl.value(self.exposure_values(phi))
        inner = self.f_basis.knot_vector.interior
        return int(np.sum((inner >= E.min()) & (inner <= E.max())))

    def range_covers(self, phi, min_knots=4) -> bool:
        """Whether the exposure range contains at least ``min_knots`` interior f-knots."""
        return self.knots_covered(phi) >= min_knots

    # ------------------------------------------------------------ objective
    def evaluate(self, u, rho, order=2, gamma_only=False, penalize_gamma=True):
        """Penalized log-likelihood and derivatives.

        Returns a dict with ``value`` and, for ``order`` >= 1, ``grad`` and,
        for ``order`` >= 2, ``hess`` (second derivatives of the penalized
        log-likelihood, not negated). With ``gamma_only`` the derivatives
        cover only ``[alpha_f, beta]``. With ``penalize_gamma`` false the
        Hessian omits the quadratic penalties on ``[alpha_f, beta]``.
        """
        phi, af, beta = self.split(u)
        lam = dl.exp(rho[:-1])
        theta = dl.exp(rho[-1])
        pen_iter = iter(range(len(self.penalties)))
        if self.free_w:
            phi_l, Cp, s, rs, a = self.weight_coefficients(phi)
            E = dl.matmul(self.Dp, a)
            lam_w = lam[next(pen_iter)]
        else:
            E = self.E_fixed
        lam_f = lam[next(pen_iter)]
        lam_h = [lam[next(pen_iter)] for _ in self._h_pen]

        Bf = self.f_design(E, 0)
        eta = dl.matmul(Bf, af)
        if self.n_beta:
            eta = eta + dl.matmul(self.Xh, beta)
        ll, le, lee = eta_terms(self.y, eta, theta)

        pen_f = self.penalties[1 if self.free_w else 0]
        Sf_af = dl.matmul(pen_f.matrix, af)
        value = ll.sum() - 0.5 * lam_f * pen_f.quadratic(af)
        pen_beta_grad = None
        if self._h_pen:
            pieces = []
            for (p, sl), lh in zip(self._h_pen, lam_h):
                Sb = dl.matmul(p.matrix, beta[sl])
                value = value - 0.5 * lh * p.quadratic(beta[sl])
                pieces.append(lh * Sb)
            pen_beta_grad = pieces
        if self.free_w:
            Swa = dl.matmul(self.Sw_plus, a)
            value = value - 0.5 * lam_w * self.penalties[0].quadratic(a)
        out = {"value": value, "E": E}
        if order < 1:
            return out

        # gradient
        g_f = dl.matmul(Bf.T, le) - lam_f * Sf_af
        parts = [g_f]
        if self.n_beta:
            g_b = dl.matmul(self.Xh.T, le)
            if pen_beta_grad is not None:
                n_pen = sum(len(pg) for pg in pen_beta_grad)
                pen = dl.concatenate(pen_beta_grad + [np.zeros(self.n_beta - n_pen)])
                g_b = g_b - pen
            parts.append(g_b)
        if self.free_w:
            eye = np.eye(len(Cp))
            J = (eye * rs - dl.outer(phi_l, Cp) * rs ** 3)[:, 1:]
            G = dl.matmul(self.Dp, J)
            Bf1 = self.f_design(E, 1)
            f1 = dl.matmul(Bf1, af)
            g_phi = dl.matmul(G.T, le * f1) - lam_w * dl.matmul(J.T, Swa)
            if not gamma_only:
                parts = [g_phi] + parts
        out["grad"] = dl.concatenate(parts)
        if order < 2:
            return out

        # Hessian
        Xg = dl.concatenate([Bf, self.Xh], axis=1) if self.n_beta else Bf
        lee_col = lee[:, None]
        H_gg = dl.matmul(Xg.T, Xg * lee_col)
        if penalize_gamma:
            H_gg = H_gg - self._gamma_penalty(lam_f, lam_h)
        if not self.free_w or gamma_only:
            out["hess"] = H_gg
            return out
        Bf2 = self.f_design(E, 2)
        f2 = dl.matmul(Bf2, af)
        Gf = G * f1[:, None]
        r_ll = dl.matmul(self.Dp.T, le * f1)
        H_pp = (dl.matmul(Gf.T, Gf * lee_col) + dl.matmul(G.T, G * (le * f2)[:, None])
                + self._contract(phi_l, Cp, rs, r_ll)
                - lam_w * (dl.matmul(J.T, dl.matmul(self.Sw_plus, J)) + self._contract(phi_l, Cp, rs, Swa)))
        H_pf = dl.matmul(Gf.T, Bf * lee_col) + dl.matmul(G.T, Bf1 * le[:, None])
        pg = [H_pf]
        if self.n_beta:
            pg.append(dl.matmul(Gf.T, self.Xh * lee_col))
        H_pg = dl.concatenate(pg, axis=1)
        out["hess"] = dl.block([[H_pp, H_pg], [H_pg.T, H_gg]])
        return out

    def _contract(self, phi_l, Cp, rs, r):
        rp = dl.matmul(r, phi_l)
        rs3 = rs ** 3
        M = (-(dl.outer(r, Cp) + dl.outer(Cp, r)) * rs3 - rp * rs3 * self.C
             + 3.0 * rp * rs3 * rs * rs * dl.outer(Cp, Cp))
        return M[1:, 1:]

    def penalty_rotation(self) -> np.ndarray:
        """Orthogonal matrix on ``u`` that diagonalizes every penalty on
        ``[alpha_f, beta]`` (identity on the weight block and unpenalized terms)."""
        Q = np.eye(self.n_u)
        for p in self.penalties:
            if p.name != "w":
                Q[p.index, p.index] = p.eigvecs
        return Q

    def rotated_penalty_diagonal(self, rho):
        """Diagonal of the ``[alpha_f, beta]`` penalty in the rotated coordinates."""
        lam = dl.exp(rho[:-1])
        parts, at = [], 0
        for p, lj in zip(self.penalties, lam):
            if p.name == "w":
                continue
            if p.index.start > at:
                parts.append(np.zeros(p.index.start - at))
            parts.append(lj * p.eigvals)
            at = p.index.stop
        parts.append(np.zeros(self.n_u - at))
        return dl.concatenate(parts)

    def _gamma_penalty(self, lam_f, lam_h):
        n = self.n_f + self.n_beta
        Sf = self.penalties[1 if self.free_w else 0].matrix
        P = np.zeros((n, n))
        P[:self.n_f, :self.n_f] = Sf
        out = lam_f * P
        for (p, sl), lh in zip(self._h_pen, lam_h):
            Q = np.zeros((n, n))
            ix = slice(self.n_f + sl.start, self.n_f + sl.stop)
            Q[ix, ix] = p.matrix
            out = out + lh * Q
        return out

    # ------------------------------------------------------------ helpers
    def loglik(self, u, theta) -> float:
        rho = np.r_[np.zeros(len(self.penalties)), np.log(theta)]
        phi, af, beta = self.split(u)
        E = self.exposure_values(phi)
        eta = self.f_basis.design(E) @ af + self.Xh @ beta
        return float(np.sum(eta_terms(self.y, eta, np.exp(rho[-1]))[0]))

    def linear_predictor(self, u):
        phi, af, beta = self.split(u)
        E = dl.value(self.exposure_values(phi))
        return self.f_basis.design(E) @ af + self.Xh @ beta

    def penalty_logdet(self, rho) -> float:
        """Sum over penalties of log |lambda S|_+ (generalized determinant)."""
        return float(sum(p.rank * r + p.log_pdet for p, r in zip(self.penalties, rho[:-1])))

    def initial_u(self):
        u = np.zeros(self.n_u)
        u[self.f_slice] = np.log(max(self.y.mean(), 1e-3))
        return u
