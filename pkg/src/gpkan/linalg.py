"""Small dense SPD linear algebra.

Everything here works on a single ``(n, n)`` matrix or on a stack of them
with shape ``(..., n, n)``; loops run over the (small) matrix order and
vectorize over the stack.  No pivoting: callers keep matrices well away
from singular with a noise floor on the diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotPositiveDefinite(ArithmeticError):
    """A Cholesky pivot was not strictly positive."""

    def __init__(self, message, index=None, pivot=None):
        super().__init__(message)
        self.index = index
        self.pivot = pivot


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray

    @property
    def order(self):
        return self.lower.shape[-1]


def _check_square(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    return a


def is_symmetric(a, rtol=1e-12):
    a = _check_square(a)
    scale = np.max(np.abs(a)) if a.size else 0.0
    return bool(np.all(np.abs(a - np.swapaxes(a, -1, -2)) <= rtol * max(scale, 1e-300)))


def cholesky(a) -> CholeskyFactor:
    """Lower Cholesky factor of a symmetric matrix (or stack of them).

    Only the lower triangle of ``a`` is read.  Raises NotPositiveDefinite on
    the first pivot <= 0; for stacks ``index`` names the offending matrix.
    """
    a = _check_square(a)
    n = a.shape[-1]
    L = np.zeros_like(a)
    for j in range(n):
        row = L[..., j, :j]
        d = a[..., j, j] - np.einsum("...k,...k->...", row, row)
        bad = ~(d > 0.0)
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0]) if bad.ndim else None
            piv = float(d[idx] if idx is not None else d)
            raise NotPositiveDefinite(
                f"pivot {j} is {piv:.3e} <= 0" + (f" in matrix {idx}" if idx else ""),
                index=idx,
                pivot=piv,
            )
        djj = np.sqrt(d)
        L[..., j, j] = djj
        if j + 1 < n:
            below = a[..., j + 1:, j] - np.einsum("...ik,...k->...i", L[..., j + 1:, :j], row)
            L[..., j + 1:, j] = below / djj[..., None]
    return CholeskyFactor(L)


def tril_inverse(lower):
    """Inverse of a lower-triangular matrix stack by forward substitution."""
    lower = np.asarray(lower, dtype=np.float64)
    n = lower.shape[-1]
    inv = np.zeros_like(lower)
    diag = np.diagonal(lower, axis1=-2, axis2=-1)
    for i in range(n):
        inv[..., i, i] = 1.0 / diag[..., i]
        if i:
            # row i of L^{-1}: -(sum_k L[i,k] inv[k,:]) / L[i,i] for columns < i
            acc = np.einsum("...k,...kc->...c", lower[..., i, :i], inv[..., :i, :i])
            inv[..., i, :i] = -acc / diag[..., i, None]
    return inv


def forward_substitute(lower, b):
    lower = np.asarray(lower, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = lower.shape[-1]
    y = np.zeros(np.broadcast_shapes(lower.shape[:-1], b.shape))
    for i in range(n):
        y[..., i] = (b[..., i] - np.einsum("...k,...k->...", lower[..., i, :i], y[..., :i])) / lower[..., i, i]
    return y


def back_substitute_transposed(lower, y):
    """Solve L^T x = y."""
    lower = np.asarray(lower, dtype=np.float64)
    n = lower.shape[-1]
    x = np.zeros(np.broadcast_shapes(lower.shape[:-1], np.shape(y)))
    for i in reversed(range(n)):
        x[..., i] = (y[..., i] - np.einsum("...k,...k->...", lower[..., i + 1:, i], x[..., i + 1:])) / lower[..., i, i]
    return x


def _check_vec(factor, v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (factor.order,):
        raise ValueError(f"{name} has length {v.shape[-1:]} but factor order is {factor.order}")
    return v


def solve_psd(factor: CholeskyFactor, b):
    """x with (L L^T) x = b, by forward then back substitution."""
    b = _check_vec(factor, b, "b")
    return back_substitute_transposed(factor.lower, forward_substitute(factor.lower, b))


def quad_form(factor: CholeskyFactor, u, v):
    """u^T (L L^T)^{-1} v computed as (L^{-1} u) . (L^{-1} v)."""
    u = _check_vec(factor, u, "u")
    v = _check_vec(factor, v, "v")
    lu = forward_substitute(factor.lower, u)
    lv = forward_substitute(factor.lower, v)
    return np.einsum("...k,...k->...", lu, lv)
