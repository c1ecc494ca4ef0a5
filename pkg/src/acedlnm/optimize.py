"""Generic numerical optimization pieces: a safeguarded Newton direction and
a BFGS minimizer with a strong-Wolfe line search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh_tridiagonal

NOT_PD_RELATIVE = 1e-8
SINGULAR_RELATIVE = 1e-8


def lanczos_min_eigenvalue(A, n_iter: int = 20, seed: int = 0) -> float:
    """Estimate of the smallest eigenvalue of symmetric ``A`` from ``n_iter``
    Lanczos steps with full reorthogonalization."""
    n = A.shape[0]
    k = min(n_iter, n)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(n)
    q /= np.linalg.norm(q)
    Q = np.zeros((k, n))
    alpha = np.zeros(k)
    beta = np.zeros(k)
    for j in range(k):
        Q[j] = q
        z = A @ q
        alpha[j] = q @ z
        z -= Q[:j + 1].T @ (Q[:j + 1] @ z)
        b = np.linalg.norm(z)
        if j + 1 == k or b < 1e-14 * max(1.0, abs(alpha[j])):
            k = j + 1
            break
        beta[j] = b
        q = z / b
    return float(eigh_tridiagonal(alpha[:k], beta[:k - 1], eigvals_only=True)[0])


def qnewton_step(H, grad, seed: int = 0) -> np.ndarray:
    """Ascent step for a maximization problem.

    ``H`` is the negated Hessian of the objective. A Cholesky solve is used
    when the Lanczos probe finds ``H`` comfortably positive definite;
    otherwise the eigenvalues are replaced by their absolute values, after a
    shift by the gradient norm when ``H`` is numerically singular.
    """
    H = 0.5 * (np.asarray(H, dtype=float) + np.asarray(H, dtype=float).T)
    grad = np.asarray(grad, dtype=float)
    scale = np.max(np.sum(np.abs(H), axis=1)) if H.size else 0.0
    if H.shape[0] == 0:
        return np.zeros(0)
    if lanczos_min_eigenvalue(H, seed=seed) > NOT_PD_RELATIVE * scale:
        try:
            return cho_solve(cho_factor(H, lower=True), grad)
        except np.linalg.LinAlgError:
            pass
    evals, V = np.linalg.eigh(H)
    mag = np.abs(evals)
    if mag.min() <= SINGULAR_RELATIVE * max(mag.max(), 1e-300):
        evals = evals + np.linalg.norm(grad)
        mag = np.abs(evals)
    mag = np.maximum(mag, 1e-300 + 1e-14 * mag.max())
    return V @ ((V.T @ grad) / mag)


@dataclass
class BFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)


class _Evaluator:
    def __init__(self, fun):
        self.fun = fun
        self.count = 0

    def __call__(self, x):
        self.count += 1
        try:
            f, g = self.fun(x)
        except (ArithmeticError, np.linalg.LinAlgError, FloatingPointError, RuntimeError):
            return np.inf, None
        if not np.isfinite(f) or g is None or not np.all(np.isfinite(g)):
            return np.inf, None
        return float(f), np.asarray(g, dtype=float)


def _cubic_min(a, fa, ga, b, fb, gb):
    """Minimizer of the cubic interpolating two points with slopes, or None."""
    d1 = ga + gb - 3.0 * (fa - fb) / (a - b)
    rad = d1 * d1 - ga * gb
    if rad < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(rad)
    x = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2)
    return x if np.isfinite(x) else None


def _line_search(ev, x, f0, g0, p, c1, c2, step0, max_eval=25):
    """Strong-Wolfe line search (bracketing then zoom). Returns (step, f, g) or None."""
    d0 = g0 @ p
    prev_a, prev_f, prev_d, prev_g = 0.0, f0, d0, None
    a = step0
    for i in range(max_eval):
        f, g = ev(x + a * p)
        if not np.isfinite(f):
            # failed evaluation counts as a very high value: shrink
            hi = a
            a = 0.5 * (prev_a + hi)
            if a - prev_a < 1e-10:
                return None
            return _zoom(ev, x, f0, d0, p, prev_a, prev_f, prev_d, hi, np.inf, None, c1, c2, max_eval - i - 1,
                         g_lo=prev_g)
        d = g @ p
        if f > f0 + c1 * a * d0 or (i > 0 and f >= prev_f):
            return _zoom(ev, x, f0, d0, p, prev_a, prev_f, prev_d, a, f, d, c1, c2, max_eval - i - 1,
                         g_lo=prev_g)
        if abs(d) <= -c2 * d0:
            return a, f, g
        if d >= 0:
            return _zoom(ev, x, f0, d0, p, a, f, d, prev_a, prev_f, prev_d, c1, c2, max_eval - i - 1, g_lo=g)
        prev_a, prev_f, prev_d, prev_g = a, f, d, g
        a = 2.0 * a
    return None


def _zoom(ev, x, f0, d0, p, lo, f_lo, d_lo, hi, f_hi, d_hi, c1, c2, budget, g_lo=None):
    best = None
    if lo > 0 and g_lo is not None:
        best = (lo, f_lo, g_lo)
    for _ in range(max(budget, 1)):
        trial = None
        if d_hi is not None and np.isfinite(f_hi):
            trial = _cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi)
        width = hi - lo
        if trial is None or not (min(lo, hi) + 0.1 * abs(width) <= trial <= max(lo, hi) - 0.1 * abs(width)):
            trial = lo + 0.5 * width
        f, g = ev(x + trial * p)
        if not np.isfinite(f):
            hi, f_hi, d_hi = trial, np.inf, None
            continue
        d = g @ p
        if f > f0 + c1 * trial * d0 or f >= f_lo:
            hi, f_hi, d_hi = trial, f, d
        else:
            if abs(d) <= -c2 * d0:
                return trial, f, g
            best = (trial, f, g)
            if d * (hi - lo) >= 0:
                hi, f_hi, d_hi = lo, f_lo, d_lo
            lo, f_lo, d_lo = trial, f, d
        if abs(hi - lo) < 1e-12:
            break
    # accept a sufficient-decrease point even without the curvature condition
    return best


def bfgs_minimize(fun, x0, gtol=1e-4, max_iter=200, max_step=5.0, c1=1e-4, c2=0.9,
                  callback=None) -> BFGSResult:
    """Minimize ``fun`` returning ``(value, gradient)``. Failed evaluations
    (exceptions or non-finite values) are treated as +inf."""
    ev = _Evaluator(fun)
    x = np.asarray(x0, dtype=float).copy()
    f, g = ev(x)
    if not np.isfinite(f):
        return BFGSResult(x, f, np.full_like(x, np.nan), 0, ev.count, False, "initial evaluation failed")
    n = len(x)
    Hinv = np.eye(n)
    trace = [f]
    first = True
    for it in range(max_iter):
        if np.max(np.abs(g)) < gtol:
            return BFGSResult(x, f, g, it, ev.count, True, "gradient tolerance reached", trace)
        p = -Hinv @ g
        if g @ p >= 0:
            Hinv = np.eye(n)
            p = -g
        norm = np.max(np.abs(p))
        step0 = 1.0 if norm <= max_step else max_step / norm
        if first:
            step0 = min(step0, 1.0 / max(norm, 1e-12))
        res = _line_search(ev, x, f, g, p, c1, c2, step0)
        if res is None:
            if not np.allclose(Hinv, np.eye(n)):
                Hinv = np.eye(n)
                continue
            return BFGSResult(x, f, g, it, ev.count, False, "line search failed", trace)
        a, f_new, g_new = res
        s = a * p
        yv = g_new - g
        sy = s @ yv
        if first and sy > 0:
            Hinv = np.eye(n) * (sy / (yv @ yv))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(yv):
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        first = False
        x, f, g = x + s, f_new, g_new
        trace.append(f)
        if callback is not None:
            callback(x, f, g)
    converged = np.max(np.abs(g)) < gtol
    return BFGSResult(x, f, g, max_iter, ev.count, converged,
                      "gradient tolerance reached" if converged else "iteration limit reached", trace)
