"""Reverse-mode differentiation on numpy arrays.

A :class:`Tape` records every primitive evaluated while it is active.
Primitives are deliberately coarse (smoothed kernel build, SPD solve, SPD
quadratic form, elementwise maps) so tapes stay short and each backward rule
is vectorized over whole layers.  Outside a tape the same functions simply
compute values, so taped and untaped forwards agree bit for bit.

Usage::

    with Tape() as tape:
        w = tape.watch(w0, "w")
        loss = ad.sum(ad.square(ad.sub(w, 3.0)))
    grads = tape.gradient(loss)
"""
from __future__ import annotations

import numpy as np

from .linalg import NotPositiveDefinite, cholesky, tril_inverse

_active: list["Tape"] = []


class NonFiniteGradient(FloatingPointError):
    def __init__(self, kind, parent_index):
        super().__init__(f"non-finite gradient produced by '{kind}' (input {parent_index})")
        self.kind = kind


class Var:
    """A value on (or off) a tape."""

    __slots__ = ("value", "parents", "vjp", "kind", "name", "requires_grad", "cache")

    def __init__(self, value, parents=(), vjp=None, kind="const", name=None, requires_grad=False):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.kind = kind
        self.name = name
        self.requires_grad = requires_grad
        self.cache = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var({self.kind}, shape={self.shape})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: dict[str, Var] = {}
        self.outputs: list[Var] = []

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def watch(self, value, name):
        """Register a named leaf whose gradient is wanted."""
        if name in self.leaves:
            raise KeyError(f"leaf {name!r} already watched")
        v = Var(np.asarray(value, dtype=np.float64), kind="leaf", name=name, requires_grad=True)
        self.leaves[name] = v
        return v

    def gradient(self, output, seed=None):
        """Gradients of a scalar ``output`` w.r.t. every watched leaf.

        Leaves that do not influence the output get zero arrays.
        """
        if output not in self.outputs:
            self.outputs.append(output)
        grads: dict[int, np.ndarray] = {}
        grads[id(output)] = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        result = {name: np.zeros_like(v.value) for name, v in self.leaves.items()}
        leaf_ids = {id(v): name for name, v in self.leaves.items()}
        if id(output) in leaf_ids:
            result[leaf_ids[id(output)]] = grads.pop(id(output))
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            pgs = node.vjp(g)
            for k, (p, pg) in enumerate(zip(node.parents, pgs)):
                if pg is None or not (isinstance(p, Var) and p.requires_grad):
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteGradient(node.kind, k)
                if id(p) in leaf_ids:
                    result[leaf_ids[id(p)]] = result[leaf_ids[id(p)]] + pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        return result


def value(x):
    return x.value if isinstance(x, Var) else x


def _tracked(args):
    return bool(_active) and any(isinstance(a, Var) and a.requires_grad for a in args)


def _emit(val, kind, parents, vjp):
    if _tracked(parents):
        node = Var(val, parents, vjp, kind, requires_grad=True)
        _active[-1].nodes.append(node)
        return node
    return Var(val, kind=kind)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if np.shape(g) == tuple(shape):
        return g
    g = np.asarray(g)
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(va + vb, "add", (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value(a), value(b)
    sa, sb = np.shape(va), np.shape(vb)
    return _emit(va - vb, "sub", (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b):
    va, vb = value(a), value(b)
    return _emit(
        va * vb, "mul", (a, b),
        lambda g: (unbroadcast(g * vb, np.shape(va)), unbroadcast(g * va, np.shape(vb))),
    )


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    return _emit(
        out, "div", (a, b),
        lambda g: (unbroadcast(g / vb, np.shape(va)), unbroadcast(-g * out / vb, np.shape(vb))),
    )


def neg(a):
    return _emit(-value(a), "neg", (a,), lambda g: (-g,))


def square(a):
    va = value(a)
    return _emit(va * va, "square", (a,), lambda g: (2.0 * g * va,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _emit(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def exp(a):
    out = np.exp(value(a))
    return _emit(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    va = value(a)
    return _emit(np.log(va), "log", (a,), lambda g: (g / va,))


def tanh(a):
    out = np.tanh(value(a))
    return _emit(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    from .gaussian_core import sigmoid as _sig

    out = np.asarray(_sig(value(a)))
    return _emit(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    va = np.asarray(value(a), dtype=np.float64)
    out = np.logaddexp(0.0, va)
    from .gaussian_core import sigmoid as _sig

    return _emit(out, "softplus", (a,), lambda g: (g * _sig(va),))


def clamp_min(a, floor=0.0):
    """max(a, floor); subgradient 0 where the clamp is active (a <= floor)."""
    va = value(a)
    live = va > floor
    return _emit(np.where(live, va, floor), "clamp", (a,), lambda g: (np.where(live, g, 0.0),))


# ------------------------------------------------------------------ structure

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    va = value(a)
    shape = np.shape(va)
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, "sum", (a,), vjp)


def reshape(a, shape):
    va = value(a)
    old = np.shape(va)
    return _emit(np.reshape(va, shape), "reshape", (a,), lambda g: (np.reshape(g, old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _emit(np.transpose(value(a), axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def gather_columns(a, index, scatter):
    """a[:, index] for 2-d ``a``; ``scatter`` is the sparse (index.size, a.shape[1])
    0/1 matrix used to route gradients back."""
    va = value(a)
    out = va[:, index]

    def vjp(g):
        flat = g.reshape(g.shape[0], -1)
        return (np.asarray((scatter.T @ flat.T).T),)

    return _emit(out, "gather", (a,), vjp)


# ------------------------------------------------------------- GP primitives

def smoothed_kernel(mu, var, z, l, s):
    """Smoothed SE kernel for a grid of neurons over a batch of inputs.

    mu, var: (n, N) input moments, one row per input feature.
    z: (M, n, p) inducing locations; l, s: (M, n) kernel scales.
    Returns kq of shape (M, n, N, p) with

        kq = s^2 (l / sqrt(t)) exp(-(mu - z)^2 / (2 t)),   t = l^2 + var.
    """
    vmu, vvar, vz, vl, vs = (np.asarray(value(x), dtype=np.float64) for x in (mu, var, z, l, s))
    t = vl[:, :, None] ** 2 + vvar[None]  # (M, n, N)
    d = vmu[None, :, :, None] - vz[:, :, None, :]
    kq = np.square(d)
    kq *= (-0.5 / t)[..., None]
    np.exp(kq, out=kq)
    kq *= ((vs * vs)[:, :, None] * (vl[:, :, None] / np.sqrt(t)))[..., None]
    ones = np.ones(vz.shape[-1])

    def vjp(g):
        gk = g * kq
        s0 = gk @ ones
        gk *= d  # now g * kq * d
        s1 = gk @ ones
        inv_t = 1.0 / t
        g_z = (inv_t[:, :, None, :] @ gk)[:, :, 0, :]
        gk *= d
        s2 = gk @ ones
        g_mu = -(s1 * inv_t).sum(axis=0)
        g_t = (s2 * inv_t - s0) * (0.5 * inv_t)
        g_var = g_t.sum(axis=0)
        g_l = (g_t * (2.0 * vl[:, :, None]) + s0 / vl[:, :, None]).sum(axis=2)
        g_s = 2.0 * s0.sum(axis=2) / vs
        return g_mu, g_var, g_z, g_l, g_s

    return _emit(kq, "smoothed_kernel", (mu, var, z, l, s), vjp)


def kernel_mean(kq, alpha):
    """Per-neuron mean kq . alpha: (M, n, N, p) x (M, n, p) -> (M, n, N)."""
    vk, va = value(kq), value(alpha)
    out = (vk @ va[..., None])[..., 0]

    def vjp(g):
        g_k = g[..., None] * va[:, :, None, :]
        g_a = (g[:, :, None, :] @ vk)[:, :, 0, :]
        return g_k, g_a

    return _emit(out, "kernel_mean", (kq, alpha), vjp)


def table_sum(table, index, scatter):
    """out[i, b] = sum_j table[i, j, index[b, j]] for a (M, n, U) table.

    ``scatter`` is the sparse (N, n*U) 0/1 matrix with a one at
    (b, j*U + index[b, j]).
    """
    vt = value(table)
    M = vt.shape[0]
    out = np.asarray((scatter @ vt.reshape(M, -1).T).T)

    def vjp(g):
        return (np.asarray((scatter.T @ g.T).T).reshape(vt.shape),)

    return _emit(out, "table_sum", (table,), vjp)


def _factor(K):
    """(L, L^{-1}) for an SPD stack, cached on the Var."""
    if isinstance(K, Var) and K.cache is not None:
        return K.cache
    f = cholesky(value(K))
    out = (f.lower, tril_inverse(f.lower))
    if isinstance(K, Var):
        K.cache = out
    return out


def psd_solve(K, b):
    """x = K^{-1} b for SPD stacks K (..., p, p) and b (..., p)."""
    _, Li = _factor(K)
    vb = value(b)
    x = np.einsum("...kj,...k->...j", Li, np.einsum("...jk,...k->...j", Li, vb))

    def vjp(g):
        gb = np.einsum("...kj,...k->...j", Li, np.einsum("...jk,...k->...j", Li, g))
        outer = gb[..., :, None] * x[..., None, :]
        gK = -0.5 * (outer + np.swapaxes(outer, -1, -2))
        return gK, unbroadcast(gb, np.shape(vb))

    return _emit(x, "psd_solve", (K, b), vjp)


def psd_quad(K, U):
    """u^T K^{-1} u for every row u of U.

    K has shape (..., p, p) and U (..., N, p) with matching leading axes;
    the result has shape (..., N).  Computed as |L^{-1} u|^2.
    """
    _, Li = _factor(K)
    vU = value(U)
    V = vU @ np.swapaxes(Li, -1, -2)
    out = np.einsum("...k,...k->...", V, V)

    def vjp(g):
        W = V @ Li  # rows of U K^{-1}
        gW = W * g[..., None]
        gK = -(np.swapaxes(gW, -1, -2) @ W)
        gW *= 2.0
        return gK, gW

    return _emit(out, "psd_quad", (K, U), vjp)


def dot_last(a, b):
    """sum(a * b, axis=-1) with broadcasting."""
    va, vb = value(a), value(b)
    out = np.einsum("...k,...k->...", *np.broadcast_arrays(va, vb))

    def vjp(g):
        ge = g[..., None]
        return unbroadcast(ge * vb, np.shape(va)), unbroadcast(ge * va, np.shape(vb))

    return _emit(out, "dot", (a, b), vjp)


__all__ = [
    "Tape", "Var", "NonFiniteGradient", "NotPositiveDefinite", "value", "unbroadcast",
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "exp", "log", "tanh", "sigmoid",
    "softplus", "clamp_min", "sum", "reshape", "transpose", "gather_columns",
    "smoothed_kernel", "kernel_mean", "table_sum", "psd_solve", "psd_quad", "dot_last",
]
