"""Nested optimization: Newton for the response-function and covariate
coefficients, Newton on the profile likelihood of the lag-weight parameters,
and BFGS on the Laplace approximate marginal likelihood over the log
smoothing parameters and log dispersion."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import dual as dl
from .model import DataSet, ModelSpec, PreparedModel
from .optimize import bfgs_minimize, qnewton_step
from .reparam import phi_to_alpha, weight_integrals

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitOptions:
    tol_inner: float = 1e-7
    tol_middle: float = 1e-6
    tol_outer: float = 1e-4
    max_halving: int = 30
    max_inner: int = 100
    max_middle: int = 100
    max_outer: int = 200
    min_f_knots: int = 4
    log_lambda_w_start: float = 6.0
    max_outer_step: float = 5.0
    record: bool = True
    logdet_by_differences: bool = False
    # smoothing parameters stop growing once the penalty exceeds the data
    # information of its block by this factor (the fit is then in the penalty null space)
    penalty_saturation: float = 1e8


@dataclass
class LevelResult:
    u: np.ndarray
    value: float
    converged: bool
    n_iter: int
    message: str = ""


@dataclass
class Traces:
    inner: list = field(default_factory=list)
    middle: list = field(default_factory=list)
    outer: list = field(default_factory=list)
    constraints: list = field(default_factory=list)


@dataclass
class FitResult:
    model: PreparedModel
    u_hat: np.ndarray
    rho_hat: np.ndarray
    neg_hessian: np.ndarray
    laml: float
    loglik: float
    edf: float
    aic: float
    n_iter: dict
    converged: bool
    message: str
    traces: Traces
    laml_grad: np.ndarray

    @property
    def theta(self) -> float:
        return float(np.exp(self.rho_hat[-1]))

    @property
    def smoothing(self) -> dict:
        return {p.name: float(np.exp(r)) for p, r in zip(self.model.penalties, self.rho_hat[:-1])}

    @property
    def phi(self):
        return self.u_hat[self.model.phi_slice]

    @property
    def alpha_f(self):
        return self.u_hat[self.model.f_slice]

    @property
    def beta(self):
        return self.u_hat[self.model.beta_slice]

    def alpha_w_plus(self):
        m = self.model
        if not m.free_w:
            return None
        return phi_to_alpha(self.phi, m.C).alpha_w_plus


class Fitter:
    def __init__(self, model: PreparedModel, options: FitOptions | None = None):
        self.model = model
        self.opt = options or FitOptions()
        self.traces = Traces()
        self.counts = {"inner": 0, "middle": 0, "outer": 0}
        self._rotation = None

    # ------------------------------------------------------------ inner
    def _roundoff(self, value):
        return 1e-11 * (1.0 + abs(value))

    @staticmethod
    def _unmeasurable(value):
        # predicted gain below the floating-point resolution of the objective
        return 10.0 * np.finfo(float).eps * (1.0 + abs(value))

    def inner(self, u, rho, fallback=None) -> LevelResult:
        """Newton ascent over ``[alpha_f, beta]`` with ``phi`` held fixed."""
        m, opt = self.model, self.opt
        gs = m.gamma_slice
        u = np.array(u, dtype=float)
        r = m.evaluate(u, rho, 2, gamma_only=True)
        if not np.isfinite(r["value"]) and fallback is not None:
            u = np.array(fallback, dtype=float)
            r = m.evaluate(u, rho, 2, gamma_only=True)
        value = float(r["value"])
        if not np.isfinite(value):
            return LevelResult(u, -np.inf, False, 0, "non-finite starting value")
        trace = [value]
        converged, msg, it = False, "iteration limit", 0
        for it in range(1, opt.max_inner + 1):
            g = r["grad"]
            if np.linalg.norm(g) < opt.tol_inner:
                converged, msg = True, "gradient tolerance"
                break
            step = qnewton_step(-r["hess"], g)
            gain = g @ step
            if gain <= self._unmeasurable(value):
                converged, msg = True, "stationary to rounding"
                break
            accepted = False
            for _ in range(opt.max_halving + 1):
                cand = u.copy()
                cand[gs] += step
                v = m.evaluate(cand, rho, 0)["value"]
                if np.isfinite(v) and v >= value:
                    accepted = True
                    break
                step = 0.5 * step
            if not accepted:
                converged = gain <= self._roundoff(value)
                if converged:
                    msg = "stationary to rounding"
                elif guarded:
                    msg = (f"ascent would shrink the exposure range below {need} knots of f; "
                           "use more knots for f")
                else:
                    msg = "step-halving limit"
                break
            u, value = cand, float(v)
            trace.append(value)
            r = m.evaluate(u, rho, 2, gamma_only=True)
        self.counts["inner"] += it
        if opt.record:
            self.traces.inner.append(trace)
        return LevelResult(u, value, converged, it, msg)

    # ------------------------------------------------------------ middle
    def _profile(self, r):
        """Profile gradient, Hessian and implicit derivative of the inner solution."""
        m = self.model
        ps, gs = m.phi_slice, slice(m.n_phi, m.n_u)
        H = r["hess"]
        neg_gg = -H[gs, gs]
        H_pg = H[ps, gs]
        try:
            cf = cho_factor(neg_gg, lower=True)
            d_gamma = cho_solve(cf, H_pg.T)
        except np.linalg.LinAlgError:
            evals, V = np.linalg.eigh(neg_gg)
            d_gamma = V @ ((V.T @ H_pg.T) / np.maximum(np.abs(evals), 1e-10 * np.abs(evals).max()))
        HQ = H[ps, ps] + H_pg @ d_gamma
        return r["grad"][ps], 0.5 * (HQ + HQ.T), d_gamma

    def _record_constraint(self, phi):
        if self.opt.record and self.model.free_w:
            a = phi_to_alpha(phi, self.model.C).alpha_w_plus
            self.traces.constraints.append(weight_integrals(self.model.stz, a))

    def middle(self, u, rho) -> LevelResult:
        """Newton ascent of the profile likelihood over ``phi``."""
        m, opt = self.model, self.opt
        first = self.inner(u, rho)
        if not m.free_w:
            self.counts["middle"] += 0
            return first
        if not first.converged:
            return LevelResult(first.u, first.value, False, 0, "inner stage failed: " + first.message)
        u, Q = first.u, first.value
        ps, gs = m.phi_slice, m.gamma_slice
        trace = [Q]
        self._record_constraint(u[ps])
        converged, msg, it = False, "iteration limit", 0
        # a start already below the threshold may move, but not below its own coverage
        need = min(opt.min_f_knots, m.knots_covered(u[ps]))
        for it in range(1, opt.max_middle + 1):
            r = m.evaluate(u, rho, 2)
            g, HQ, d_gamma = self._profile(r)
            if np.linalg.norm(g) < opt.tol_middle:
                converged, msg = True, "gradient tolerance"
                break
            step = qnewton_step(-HQ, g)
            gain = g @ step
            if gain <= self._unmeasurable(Q):
                converged, msg = True, "stationary to rounding"
                break
            accepted, guarded = False, True
            for _ in range(opt.max_halving + 1):
                phi_c = u[ps] + step
                if m.range_covers(phi_c, need):
                    guarded = False
                    start = u.copy()
                    start[ps] = phi_c
                    plain = start.copy()
                    start[gs] += d_gamma @ step
                    res = self.inner(start, rho, fallback=plain)
                    if res.converged and res.value >= Q:
                        accepted = True
                        break
                step = 0.5 * step
            if not accepted:
                converged = gain <= self._roundoff(Q)
                if converged:
                    msg = "stationary to rounding"
                elif guarded:
                    msg = (f"ascent would shrink the exposure range below {need} knots of f; "
                           "use more knots for f")
                else:
                    msg = "step-halving limit"
                break
            u, Q = res.u, res.value
            trace.append(Q)
            self._record_constraint(u[ps])
        self.counts["middle"] += it
        if opt.record:
            self.traces.middle.append(trace)
        return LevelResult(u, Q, converged, it, msg)

    def polish(self, u, rho, value):
        """One joint Newton step over all of ``u`` from a converged point.

        The nested stages stop at their gradient tolerances; the LAML depends
        to first order on the remaining error through log det H, so a final
        full step (quadratically convergent from here) reduces its noise.
        """
        m = self.model
        r = m.evaluate(u, rho, 2)
        try:
            step = cho_solve(cho_factor(-r["hess"], lower=True), r["grad"])
        except np.linalg.LinAlgError:
            return u, value
        if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 1e-2:
            return u, value
        cand = u + step
        need = min(self.opt.min_f_knots, m.knots_covered(u[m.phi_slice])) if m.free_w else 0
        if m.free_w and not m.range_covers(cand[m.phi_slice], need):
            return u, value
        v = float(m.evaluate(cand, rho, 0)["value"])
        if np.isfinite(v) and v >= value - self._roundoff(value):
            return cand, v
        return u, value

    # ------------------------------------------------------------ LAML
    def neg_hessian_logdet(self, u, rho):
        """log det of the negative penalized Hessian.

        Large smoothing parameters put entries many orders above the data
        information into the Hessian, and forming the sum in the original
        coordinates would round away the small eigenvalues. The penalty is
        therefore added in its own eigenbasis, and the result is Jacobi scaled
        before the Cholesky factorization.
        """
        m = self.model
        if self._rotation is None:
            self._rotation = m.penalty_rotation()
        Q = self._rotation
        A = -m.evaluate(u, rho, 2, penalize_gamma=False)["hess"]
        M = dl.matmul(Q.T, dl.matmul(A, Q))
        M = M + m.rotated_penalty_diagonal(rho)[:, None] * np.eye(m.n_u)
        idx = np.arange(m.n_u)
        d = dl.sqrt(M[idx, idx])
        return dl.logdet_spd(M / dl.outer(d, d)) + 2.0 * dl.log(d).sum()

    def laml_value(self, u_hat, rho) -> float:
        m = self.model
        value = m.evaluate(u_hat, rho, 0)["value"]
        return float(value - 0.5 * self.neg_hessian_logdet(u_hat, rho) + 0.5 * m.penalty_logdet(rho))

    def laml_gradient(self, u_hat, rho) -> np.ndarray:
        m = self.model
        k = m.n_rho
        seed = dl.Dual(rho, np.eye(k))
        r1 = m.evaluate(u_hat, seed, 1)
        direct = r1["value"].d
        cross = r1["grad"].d                         # d grad_u / d rho
        r0 = m.evaluate(u_hat, rho, 2)
        neg_h = -r0["hess"]
        cf = cho_factor(neg_h, lower=True)
        du = cho_solve(cf, cross)                    # d u_hat / d rho
        envelope = r1["grad"].v @ du
        if self.opt.logdet_by_differences:
            d_logdet = self._logdet_differences(u_hat, rho, du)
        else:
            d_logdet = self.neg_hessian_logdet(dl.Dual(u_hat, du), seed).d
        ranks = np.array([p.rank for p in m.penalties] + [0.0])
        return direct + envelope - 0.5 * d_logdet + 0.5 * ranks

    def _logdet_differences(self, u_hat, rho, du, h=1e-5):
        out = np.zeros(len(rho))
        for j in range(len(rho)):
            e = np.zeros(len(rho))
            e[j] = h
            out[j] = (self.neg_hessian_logdet(u_hat + h * du[:, j], rho + e)
                      - self.neg_hessian_logdet(u_hat - h * du[:, j], rho - e)) / (2 * h)
        return out

    # ------------------------------------------------------------ outer
    def rho_upper(self, u, rho) -> np.ndarray:
        """Upper limits for the log smoothing parameters of the ``[alpha_f, beta]``
        penalties, relative to the data information of each block at ``u``."""
        m = self.model
        info = np.diag(-m.evaluate(u, rho, 2, penalize_gamma=False)["hess"])
        upper = np.full(m.n_rho, np.inf)
        for j, p in enumerate(m.penalties):
            if p.name != "w":
                scale = max(float(np.mean(info[p.index])), 1e-12)
                upper[j] = np.log(self.opt.penalty_saturation * scale / p.eigvals.max())
        return upper

    def outer(self, rho0, u0, callback=None):
        """BFGS on the negated LAML. Each evaluation warm-starts from the last
        accepted iterate's coefficients. Log smoothing parameters beyond their
        saturation limit are evaluated at the limit, where the objective is flat."""
        self.warm = np.array(u0, dtype=float)
        self.upper = self.rho_upper(self.warm, np.asarray(rho0, dtype=float))
        cache = {}

        def objective(rho):
            value, grad = saturated(np.minimum(rho, self.upper))
            above = rho > self.upper
            at = (rho == self.upper) & (grad > 0)
            grad = np.where(above | at, 0.0, grad)
            cache[rho.tobytes()] = cache[np.minimum(rho, self.upper).tobytes()]
            return -value, -grad

        def saturated(rho):
            key = rho.tobytes()
            if key in cache:
                return cache[key][1], cache[key][2]
            res = self.middle(self.warm, rho)
            if not res.converged:
                raise ConvergenceError(res.message)
            u_hat, _ = self.polish(res.u, rho, res.value)
            value = self.laml_value(u_hat, rho)
            grad = self.laml_gradient(u_hat, rho)
            cache[key] = (u_hat, value, grad)
            return value, grad

        def accepted(x, f, g):
            self.warm = cache[x.tobytes()][0]
            self.traces.outer.append(-f)
            if self.opt.record and self.model.free_w:
                self._record_constraint(self.warm[self.model.phi_slice])
            if callback is not None:
                callback(x, -f)

        try:
            f0, _ = objective(np.asarray(rho0, dtype=float))
            self.traces.outer.append(-f0)
            self.warm = cache[np.asarray(rho0, dtype=float).tobytes()][0]
        except (ConvergenceError, np.linalg.LinAlgError, ArithmeticError) as exc:
            raise ConvergenceError(f"initial evaluation failed: {exc}") from exc
        res = bfgs_minimize(objective, rho0, gtol=self.opt.tol_outer, max_iter=self.opt.max_outer,
                            max_step=self.opt.max_outer_step, callback=accepted)
        self.counts["outer"] = res.n_iter
        if not res.converged and res.message == "line search failed":
            self.warm = cache[res.x.tobytes()][0]
            if self._one_sided_stationary(objective, res.x):
                res.converged, res.message = True, "stationary at a non-smooth point"
        u_hat = cache[res.x.tobytes()][0]
        res.x = np.minimum(res.x, self.upper)
        return res, u_hat

    def _one_sided_stationary(self, objective, x, eps=1e-7) -> bool:
        """No coordinate direction ascends faster than the outer tolerance.

        The LAML gradient jumps where a fitted exposure value crosses a knot of
        f (the third derivative of a cubic spline is piecewise constant), so a
        maximum can sit on a kink where no gradient is small. Each one-sided
        derivative is extrapolated from two nearby gradients to cancel curvature.
        """
        tol = self.opt.tol_outer
        for j in range(len(x)):
            e = np.zeros(len(x))
            e[j] = eps
            try:
                right = 2.0 * -objective(x + e)[1][j] - -objective(x + 2 * e)[1][j]
                left = 2.0 * -objective(x - e)[1][j] - -objective(x - 2 * e)[1][j]
            except (ConvergenceError, np.linalg.LinAlgError, ArithmeticError):
                return False
            if right > tol or left < -tol:
                return False
        return True

    def finish(self, bfgs, u_hat) -> FitResult:
        m = self.model
        rho = bfgs.x
        r = m.evaluate(u_hat, rho, 2)
        neg_h = -r["hess"]
        neg_h = 0.5 * (neg_h + neg_h.T)
        rho_free = np.r_[np.full(len(m.penalties), -np.inf), rho[-1]]
        with np.errstate(invalid="ignore"):
            unpen = -m.evaluate(u_hat, rho_free, 2)["hess"]
        edf = float(np.trace(np.linalg.solve(neg_h, unpen)))
        loglik = m.loglik(u_hat, np.exp(rho[-1]))
        aic = -2.0 * loglik + 2.0 * (edf + 1.0)
        return FitResult(
            model=m, u_hat=u_hat, rho_hat=rho, neg_hessian=neg_h, laml=-bfgs.fun, loglik=loglik,
            edf=edf, aic=aic, n_iter=dict(self.counts), converged=bool(bfgs.converged),
            message=bfgs.message, traces=self.traces, laml_grad=-bfgs.grad)


def _moment_theta(y):
    mean, var = y.mean(), y.var()
    excess = max(var - mean, 1e-2 * mean)
    return float(np.clip(mean * mean / excess, 0.1, 1e3))


def fit_prepared(model: PreparedModel, rho0, u0=None, options: FitOptions | None = None) -> FitResult:
    fitter = Fitter(model, options)
    u0 = model.initial_u() if u0 is None else u0
    # trial points far from the optimum may overflow; they are rejected, not reported
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        bfgs, u_hat = fitter.outer(np.asarray(rho0, dtype=float), u0)
        result = fitter.finish(bfgs, u_hat)
    if not result.converged:
        log.warning("outer optimization did not converge: %s", result.message)
    return result


def fit_fixed_weights(spec: ModelSpec, data: DataSet, weights="lag0", options: FitOptions | None = None,
                      rho0=None) -> FitResult:
    """Fit with a known discrete lag-weight window (a GAM on the fixed exposure)."""
    model = PreparedModel(spec, data, fixed_weights=weights)
    if rho0 is None:
        rho0 = np.r_[np.zeros(len(model.penalties)), np.log(_moment_theta(model.y))]
    return fit_prepared(model, rho0, options=options)


def starting_values(spec: ModelSpec, data: DataSet, model: PreparedModel, options=None):
    """Hyperparameters and covariate coefficients from a same-day-exposure
    fixed-weight fit, with the weight smoothing parameter set separately."""
    opt = options or FitOptions()
    quiet = FitOptions(**{**opt.__dict__, "record": False})
    try:
        gam = fit_fixed_weights(spec, data, "lag0", quiet)
        rho_gam = gam.rho_hat
        beta = gam.beta
    except ConvergenceError:
        rho_gam = np.r_[np.zeros(len(model.penalties) - 1), np.log(_moment_theta(model.y))]
        beta = np.zeros(model.n_beta)
    rho0 = np.r_[opt.log_lambda_w_start, rho_gam]
    u0 = model.initial_u()
    u0[model.beta_slice] = beta
    return rho0, u0


def fit(spec: ModelSpec, data: DataSet, options: FitOptions | None = None, rho0=None, u0=None) -> FitResult:
    """Fit the adaptive cumulative exposure model."""
    model = PreparedModel(spec, data)
    if rho0 is None:
        rho0, u_start = starting_values(spec, data, model, options)
        u0 = u_start if u0 is None else u0
    return fit_prepared(model, rho0, u0, options)
