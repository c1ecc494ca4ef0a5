"""Pointwise confidence intervals for the fitted curves, by sampling from
the Gaussian approximation of the coefficient posterior or by the delta
method, and plain curve evaluation on user grids.

Everything here works from a :class:`CurveModel`, a self-contained summary
of a fit that can be stored and reloaded without the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.stats import norm

from .dual import value
from .reparam import reparam_jacobian
from .splines import BSplineBasis, DomainError, KnotVector

DEFAULT_DRAWS = 1000
MIN_DRAWS = 100


@dataclass
class CurveEstimate:
    kind: str            # "w", "f" or "h:<name>"
    grid: np.ndarray
    point: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def containment_violations(self) -> int:
        if self.lower is None:
            return 0
        return int(np.sum((self.point < self.lower) | (self.point > self.upper)))


@dataclass
class CurveTerm:
    """A curve ``B(x) @ transform @ c`` on a cubic B-spline basis, where ``c``
    is ``u[start:stop]`` (or, for the weight curve, its normalized image)."""
    kind: str
    knots: np.ndarray
    boundary: tuple
    transform: np.ndarray
    start: int
    stop: int

    @property
    def index(self) -> slice:
        return slice(self.start, self.stop)

    def basis(self) -> BSplineBasis:
        return BSplineBasis(KnotVector(np.asarray(self.knots, dtype=float), tuple(self.boundary)))

    def design(self, grid) -> np.ndarray:
        return self.basis().design(grid) @ self.transform


@dataclass
class CurveModel:
    u_hat: np.ndarray
    neg_hessian: np.ndarray
    terms: dict                 # kind -> CurveTerm
    weight_gram: np.ndarray | None
    exposure_range: tuple
    max_lag: float

    @classmethod
    def from_fit(cls, fit) -> "CurveModel":
        m = fit.model
        terms = {}
        if m.free_w:
            terms["w"] = CurveTerm("w", m.w_basis.knots, m.w_basis.boundary, m.stz.transform, 0, m.n_phi)
        terms["f"] = CurveTerm("f", m.f_basis.knots, m.f_basis.boundary, np.eye(m.n_f),
                               m.f_slice.start, m.f_slice.stop)
        for sm in m.smooths:
            p = next(p for p in m.penalties if p.name == f"h:{sm.name}")
            terms[p.name] = CurveTerm(p.name, sm.basis.knots, sm.basis.boundary, sm.centering,
                                      p.index.start, p.index.stop)
        e = value(m.exposure_values(fit.u_hat[m.phi_slice]))
        return cls(np.asarray(fit.u_hat, dtype=float), np.asarray(fit.neg_hessian, dtype=float), terms,
                   m.C if m.free_w else None, (float(e.min()), float(e.max())), float(m.spec.max_lag))

    def domains(self) -> dict:
        return {k: tuple(t.boundary) for k, t in self.terms.items()}

    def to_dict(self) -> dict:
        return {
            "u_hat": self.u_hat.tolist(),
            "neg_hessian": self.neg_hessian.tolist(),
            "weight_gram": None if self.weight_gram is None else self.weight_gram.tolist(),
            "exposure_range": list(self.exposure_range),
            "max_lag": self.max_lag,
            "terms": {k: {"knots": np.asarray(t.knots).tolist(), "boundary": list(t.boundary),
                          "transform": np.asarray(t.transform).tolist(), "start": t.start, "stop": t.stop}
                      for k, t in self.terms.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "CurveModel":
        terms = {k: CurveTerm(k, np.asarray(t["knots"], dtype=float), tuple(t["boundary"]),
                              np.asarray(t["transform"], dtype=float), int(t["start"]), int(t["stop"]))
                 for k, t in d["terms"].items()}
        gram = None if d["weight_gram"] is None else np.asarray(d["weight_gram"], dtype=float)
        return cls(np.asarray(d["u_hat"], dtype=float), np.asarray(d["neg_hessian"], dtype=float), terms, gram,
                   tuple(d["exposure_range"]), float(d["max_lag"]))


def as_curve_model(obj) -> CurveModel:
    return obj if isinstance(obj, CurveModel) else CurveModel.from_fit(obj)


def fitted_exposure(fit, u=None) -> np.ndarray:
    """Estimated exposure summary at the modelled times."""
    m = fit.model
    u = fit.u_hat if u is None else u
    return value(m.exposure_values(u[m.phi_slice]))


def default_grids(fit, n: int = 100) -> dict:
    """Evenly spaced grids: [0, L] for w, the fitted exposure range for f and
    each covariate's range for the smooth terms."""
    cm = as_curve_model(fit)
    grids = {}
    for kind, term in cm.terms.items():
        lo, hi = cm.exposure_range if kind == "f" else term.boundary
        grids[kind] = np.linspace(lo, hi, n)
    return grids


def _check_grid(cm: CurveModel, kind, grid):
    if kind not in cm.terms:
        raise KeyError(f"unknown curve {kind!r}; available: {sorted(cm.terms)}")
    lo, hi = cm.terms[kind].boundary
    grid = np.asarray(grid, dtype=float)
    tol = 1e-9 * max(1.0, abs(lo), abs(hi))
    if grid.ndim != 1 or not np.all(np.isfinite(grid)) or np.any(grid < lo - tol) or np.any(grid > hi + tol):
        raise DomainError(f"grid for {kind!r} outside its domain [{lo}, {hi}]")
    return np.clip(grid, lo, hi)


def _alpha_plus_rows(phis, C):
    phi_l = np.column_stack([np.ones(len(phis)), phis])
    s = np.einsum("ri,ij,rj->r", phi_l, C, phi_l)
    return phi_l / np.sqrt(s)[:, None]


def _curve_values(cm: CurveModel, kind, X, U):
    """Curve values on design ``X`` for each row of the coefficient matrix ``U``."""
    term = cm.terms[kind]
    if kind == "w":
        return _alpha_plus_rows(U[:, term.index], cm.weight_gram) @ X.T
    return U[:, term.index] @ X.T


def evaluate_curves(fit, grids: dict) -> list:
    cm = as_curve_model(fit)
    out = []
    for kind, grid in grids.items():
        g = _check_grid(cm, kind, grid)
        X = cm.terms[kind].design(g)
        out.append(CurveEstimate(kind, g, _curve_values(cm, kind, X, cm.u_hat[None, :])[0]))
    return out


def draw_coefficients(fit, R: int = DEFAULT_DRAWS, seed: int = 0) -> np.ndarray:
    """R draws from N(u_hat, H^-1) with H the negated Hessian at the mode."""
    cm = as_curve_model(fit)
    try:
        L = np.linalg.cholesky(cm.neg_hessian)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("Hessian at the mode is not positive definite") from exc
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((cm.u_hat.size, R))
    return cm.u_hat[None, :] + solve_triangular(L, z, lower=True, trans="T").T


def sample_cis(fit, grids: dict, R: int = DEFAULT_DRAWS, alpha: float = 0.05, seed: int = 0) -> list:
    """Pointwise intervals from empirical quantiles of curves over coefficient draws."""
    if R < MIN_DRAWS:
        raise ValueError(f"at least {MIN_DRAWS} draws are needed for tail quantiles, got {R}")
    cm = as_curve_model(fit)
    U = draw_coefficients(cm, R, seed)
    out = []
    for kind, grid in grids.items():
        g = _check_grid(cm, kind, grid)
        X = cm.terms[kind].design(g)
        vals = _curve_values(cm, kind, X, U)
        lo, hi = np.quantile(vals, [alpha / 2, 1 - alpha / 2], axis=0)
        point = _curve_values(cm, kind, X, cm.u_hat[None, :])[0]
        out.append(CurveEstimate(kind, g, point, lo, hi))
    return out


def delta_cis(fit, grids: dict, alpha: float = 0.05) -> list:
    """Pointwise Wald intervals with standard errors from the linearized curve map."""
    cm = as_curve_model(fit)
    cov = np.linalg.inv(cm.neg_hessian)
    cov = 0.5 * (cov + cov.T)
    z = norm.ppf(1 - alpha / 2)
    out = []
    for kind, grid in grids.items():
        g = _check_grid(cm, kind, grid)
        term = cm.terms[kind]
        X = term.design(g)
        J = X @ reparam_jacobian(cm.u_hat[term.index], cm.weight_gram) if kind == "w" else X
        V = cov[term.index, term.index]
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", J, V, J), 0.0))
        point = _curve_values(cm, kind, X, cm.u_hat[None, :])[0]
        out.append(CurveEstimate(kind, g, point, point - z * se, point + z * se))
    return out


def confidence_intervals(fit, grids: dict, method: str = "sampling", R: int = DEFAULT_DRAWS,
                         alpha: float = 0.05, seed: int = 0) -> list:
    if method == "sampling":
        return sample_cis(fit, grids, R, alpha, seed)
    if method == "delta":
        return delta_cis(fit, grids, alpha)
    raise ValueError(f"unknown interval method {method!r}")
