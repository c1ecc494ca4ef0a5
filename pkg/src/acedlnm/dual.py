"""Forward-mode dual numbers over numpy arrays with several tangent directions.

A :class:`Dual` holds a value array ``v`` and a tangent array ``d`` of shape
``v.shape + (m,)``, one slice per direction. Only the operations needed by the
model evaluation are provided; the helpers at the bottom accept plain arrays
too, so the same code runs with or without tangents.
"""

from __future__ import annotations

import numpy as np

from . import special


class Dual:
    __array_ufunc__ = None
    __slots__ = ("v", "d")

    def __init__(self, v, d):
        self.v = np.asarray(v, dtype=float)
        self.d = np.asarray(d, dtype=float)
        if self.d.shape[:-1] != self.v.shape:
            raise ValueError(f"tangent shape {self.d.shape} does not extend value shape {self.v.shape}")

    @classmethod
    def constant(cls, v, m: int):
        v = np.asarray(v, dtype=float)
        return cls(v, np.zeros(v.shape + (m,)))

    @classmethod
    def seed(cls, v, directions):
        """Value ``v`` with tangent ``directions`` of shape ``v.shape + (m,)``."""
        return cls(v, directions)

    @property
    def m(self) -> int:
        return self.d.shape[-1]

    @property
    def shape(self):
        return self.v.shape

    @property
    def ndim(self):
        return self.v.ndim

    def __len__(self):
        return len(self.v)

    def __repr__(self):
        return f"Dual(v={self.v!r}, d=<{self.d.shape}>)"

    def _full(self, shape):
        return np.broadcast_to(self.d, tuple(shape) + (self.m,))

    # arithmetic
    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.v + other.v, self.d + other.d)
        v = self.v + other
        return Dual(v, self._full(v.shape))

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.v, -self.d)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.v * other.v, self.d * other.v[..., None] + self.v[..., None] * other.d)
        other = np.asarray(other, dtype=float)
        return Dual(self.v * other, self.d * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.v
            v = self.v * inv
            return Dual(v, (self.d - v[..., None] * other.d) * inv[..., None])
        other = np.asarray(other, dtype=float)
        return Dual(self.v / other, self.d / other[..., None])

    def __rtruediv__(self, other):
        inv = 1.0 / self.v
        v = np.asarray(other, dtype=float) * inv
        return Dual(v, -(v * inv)[..., None] * self.d)

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("dual exponents are not supported")
        return Dual(self.v ** p, (p * self.v ** (p - 1))[..., None] * self.d)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # indexing and shape
    def __getitem__(self, idx):
        return Dual(self.v[idx], self.d[idx])

    def __setitem__(self, idx, value):
        if isinstance(value, Dual):
            self.v[idx] = value.v
            self.d[idx] = value.d
        else:
            self.v[idx] = value
            self.d[idx] = 0.0

    @property
    def T(self):
        if self.ndim != 2:
            raise ValueError("transpose only defined for matrices")
        return Dual(self.v.T, self.d.transpose(1, 0, 2))

    def sum(self, axis=None):
        if axis is None:
            axis = tuple(range(self.ndim))
        return Dual(self.v.sum(axis=axis), self.d.sum(axis=axis))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        v = self.v.reshape(shape)
        return Dual(v, self.d.reshape(v.shape + (self.m,)))

    def copy(self):
        return Dual(self.v.copy(), self.d.copy())


def value(x):
    return x.v if isinstance(x, Dual) else np.asarray(x, dtype=float)


def tangent(x, m: int | None = None):
    if isinstance(x, Dual):
        return x.d
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape + (m or 0,))


def is_dual(*xs) -> bool:
    return any(isinstance(x, Dual) for x in xs)


_EINSUM = {
    (2, 2): ("ikm,kj->ijm", "ik,kjm->ijm"),
    (2, 1): ("ikm,k->im", "ik,km->im"),
    (1, 2): ("km,kj->jm", "k,kjm->jm"),
    (1, 1): ("km,k->m", "k,km->m"),
}


def matmul(a, b):
    if not is_dual(a, b):
        return np.asarray(a) @ np.asarray(b)
    av, bv = value(a), value(b)
    left, right = _EINSUM[(av.ndim, bv.ndim)]
    v = av @ bv
    d = 0.0
    if isinstance(a, Dual):
        d = d + np.einsum(left, a.d, bv)
    if isinstance(b, Dual):
        d = d + np.einsum(right, av, b.d)
    return Dual(v, d)


def _chain(x, f, df):
    if isinstance(x, Dual):
        return Dual(f(x.v), df(x.v)[..., None] * x.d)
    return f(np.asarray(x, dtype=float))


def exp(x):
    if isinstance(x, Dual):
        v = np.exp(x.v)
        return Dual(v, v[..., None] * x.d)
    return np.exp(x)


def log(x):
    return _chain(x, np.log, lambda v: 1.0 / v)


def log1p(x):
    return _chain(x, np.log1p, lambda v: 1.0 / (1.0 + v))


def sqrt(x):
    return _chain(x, np.sqrt, lambda v: 0.5 / np.sqrt(v))


def lgamma(x):
    return _chain(x, special.lgamma, special.digamma)


def digamma(x):
    return _chain(x, special.digamma, special.trigamma)


def trigamma(x):
    return _chain(x, special.trigamma, special.tetragamma)


def outer(a, b):
    return a[:, None] * b[None, :]


def concatenate(parts, axis=0):
    if not is_dual(*parts):
        return np.concatenate([np.asarray(p, dtype=float) for p in parts], axis=axis)
    m = next(p.m for p in parts if isinstance(p, Dual))
    v = np.concatenate([value(p) for p in parts], axis=axis)
    d = np.concatenate([tangent(p, m) for p in parts], axis=axis)
    return Dual(v, d)


def block(rows):
    """Assemble a 2-d block matrix from a list of lists of 2-d pieces."""
    return concatenate([concatenate(r, axis=1) for r in rows], axis=0)


def cholesky(A):
    """Lower Cholesky factor; for dual input the tangent follows the
    column-by-column recurrences of the factorization.

    Raises ``np.linalg.LinAlgError`` when the matrix is not positive definite.
    """
    if not isinstance(A, Dual):
        return np.linalg.cholesky(A)
    Av, Ad = A.v, A.d
    n = Av.shape[0]
    L = np.zeros_like(Av)
    Ld = np.zeros_like(Ad)
    for j in range(n):
        s = Av[j, j] - L[j, :j] @ L[j, :j]
        sd = Ad[j, j] - 2.0 * L[j, :j] @ Ld[j, :j]
        if not s > 0:
            raise np.linalg.LinAlgError("matrix is not positive definite")
        ljj = np.sqrt(s)
        L[j, j] = ljj
        Ld[j, j] = 0.5 * sd / ljj
        if j + 1 < n:
            r = Av[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]
            rd = (Ad[j + 1:, j] - np.einsum("ikm,k->im", Ld[j + 1:, :j], L[j, :j])
                  - np.einsum("ik,km->im", L[j + 1:, :j], Ld[j, :j]))
            L[j + 1:, j] = r / ljj
            Ld[j + 1:, j] = (rd - (r / ljj)[:, None] * Ld[j, j][None, :]) / ljj
    return Dual(L, Ld)


def logdet_spd(A):
    """log det of a symmetric positive definite matrix via its Cholesky factor."""
    L = cholesky(A)
    if isinstance(L, Dual):
        diag = np.diagonal(L.v)
        dd = np.diagonal(L.d, axis1=0, axis2=1)  # (m, n)
        return Dual(2.0 * np.sum(np.log(diag)), 2.0 * np.sum(dd / diag[None, :], axis=1))
    return 2.0 * np.sum(np.log(np.diag(L)))
