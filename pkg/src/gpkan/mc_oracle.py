"""Monte-Carlo check of the closed-form neuron moments.

One trial draws ``n`` inputs x_i ~ N(mu_x, var_x), draws the GP posterior
f jointly at those locations and records y = mean(f_i).  Over many trials
the sample mean and variance of y should approach ``neuron_forward``.

Two samplers produce the same law for y:

``"joint"``
    Builds the n x n posterior covariance, adds 1e-10 jitter and draws f
    through its Cholesky factor.  O(n^3) per trial.
``"marginal"`` (default)
    Given the x_i, y is exactly N(mean(m(x_i)), 1^T S 1 / n^2) with S the
    posterior covariance, so y is drawn from that directly.  1^T K_xx 1 is
    evaluated through a 2-d Chebyshev expansion of the SE kernel, which is
    accurate to roughly machine precision and costs O(n * degree).

Generators are numpy PCG64, seeded per chunk of trials from (seed, chunk).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .gaussian_core import GaussianScalar
from .gp_neuron import GPNeuronParams, kernel_se, neuron_forward, posterior_cache

JITTER = 1e-10
CHUNK = 500
CHEB_MAX_DEGREE = 256


class MCFactorError(ArithmeticError):
    """Posterior covariance would not factorize even with jitter."""


@dataclass(frozen=True)
class MCEstimate:
    mean_hat: float
    var_hat: float
    n_samples: int
    se_mean: float
    se_var: float
    seed: int

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least two samples")


def _estimate(y, seed):
    y = np.asarray(y, dtype=np.float64)
    T = y.size
    mean = float(y.mean())
    c = y - mean
    var = float(c @ c / (T - 1))
    m4 = float(np.mean(c ** 4))
    # Standard errors are floored at a tiny positive value so a degenerate
    # (constant) sample still satisfies se > 0.
    tiny = np.finfo(float).tiny
    se_mean = max(math.sqrt(var / T), tiny)
    se_var = max(math.sqrt(max(m4 - var * var, 0.0) / T), tiny)
    return MCEstimate(mean, var, T, se_mean, se_var, seed)


def _chunks(n_trials):
    start = 0
    while start < n_trials:
        yield start // CHUNK, min(CHUNK, n_trials - start)
        start += CHUNK


def _cheb_coefficients(l, s, c, r):
    """Coefficients C with K(x, x') ~ sum_ab C_ab T_a(t) T_b(t') on [c - r, c + r]."""
    d = CHEB_MAX_DEGREE
    j = np.arange(d + 1)
    theta = np.pi * (j + 0.5) / (d + 1)
    x = c + r * np.cos(theta)
    F = kernel_se(x[:, None], x[None, :], l, s)
    T = (2.0 / (d + 1)) * np.cos(np.outer(j, theta))
    T[0] *= 0.5
    C = T @ F @ T.T
    mag = np.maximum(np.abs(C).max(axis=0), np.abs(C).max(axis=1))
    if mag[-1] > 1e-13 * mag.max():
        return None  # lengthscale too short for the grid: series has not converged
    keep = np.nonzero(mag > 1e-14 * mag.max())[0]  # the transform's rounding noise sits near 1e-15
    deg = int(keep[-1]) + 1 if keep.size else 1
    return C[:deg, :deg]


def _cheb_sums(t, degree):
    """sum_i T_a(t_i) for a < degree, per row of t (rows are trials)."""
    out = np.empty((t.shape[0], degree))
    out[:, 0] = t.shape[1]
    if degree > 1:
        ones = np.ones(t.shape[1])
        prev, cur, nxt = np.ones_like(t), t.copy(), np.empty_like(t)
        out[:, 1] = cur @ ones
        two_t = 2.0 * t
        for a in range(2, degree):
            np.multiply(two_t, cur, out=nxt)
            nxt -= prev
            prev, cur, nxt = cur, nxt, prev
            out[:, a] = cur @ ones
    return out


def kernel_total(x, l, s):
    """1^T K(x, x) 1 for each row of x, via the Chebyshev expansion.

    Falls back to the O(n^2) pairwise sum when the lengthscale is too short
    relative to the spread of x for the expansion to converge.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    lo, hi = float(x.min()), float(x.max())
    c = 0.5 * (lo + hi)
    r = max(0.5 * (hi - lo), 1e-12 * max(l, 1.0))
    C = _cheb_coefficients(l, s, c, r)
    if C is None:
        return np.array([kernel_se(row[:, None], row[None, :], l, s).sum() for row in x])
    t = np.clip((x - c) / r, -1.0, 1.0)
    A = _cheb_sums(t, C.shape[0])
    return np.einsum("ta,ab,tb->t", A, C, A)


def _sample_marginal(params, input, n, count, rng, cache):
    x = rng.normal(input.mean, math.sqrt(input.variance), size=(count, n))
    Kxz = kernel_se(x[..., None], params.z, params.l, params.s)  # (count, n, p)
    mbar = (Kxz @ cache.alpha).mean(axis=1)
    b = Kxz.sum(axis=1)  # K_zx 1, (count, p)
    L = cache.factor.lower
    w = scipy.linalg.solve_triangular(L, b.T, lower=True)
    explained = np.einsum("pc,pc->c", w, w)
    vbar = (kernel_total(x, params.l, params.s) - explained) / (n * n)
    vbar = np.maximum(vbar, 0.0)
    return mbar + np.sqrt(vbar) * rng.standard_normal(count)


def _sample_joint(params, input, n, count, rng, cache):
    out = np.empty(count)
    L = cache.factor.lower
    for k in range(count):
        x = rng.normal(input.mean, math.sqrt(input.variance), size=n)
        Kxz = kernel_se(x[:, None], params.z[None, :], params.l, params.s)
        mean = Kxz @ cache.alpha
        V = scipy.linalg.solve_triangular(L, Kxz.T, lower=True)
        S = kernel_se(x[:, None], x[None, :], params.l, params.s) - V.T @ V
        S[np.diag_indices(n)] += JITTER
        try:
            F = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise MCFactorError(
                f"posterior covariance not factorizable for mu_x={input.mean}, var_x={input.variance}, "
                f"l={params.l}, s={params.s}, sn2={params.sn2}"
            ) from exc
        f = mean + F @ rng.standard_normal(n)
        out[k] = f.mean()
    return out


SAMPLERS = {"marginal": _sample_marginal, "joint": _sample_joint}


def mc_neuron_moments(params: GPNeuronParams, input: GaussianScalar, n=1000, n_trials=20000, seed=0,
                      method="marginal") -> MCEstimate:
    if n < 100 or n_trials < 100:
        raise ValueError(f"need n >= 100 and n_trials >= 100, got {n} and {n_trials}")
    sampler = SAMPLERS[method]
    cache = posterior_cache(params)
    y = np.empty(n_trials)
    pos = 0
    for chunk, count in _chunks(n_trials):
        rng = np.random.default_rng([seed, chunk])
        y[pos:pos + count] = sampler(params, input, n, count, rng, cache)
        pos += count
    return _estimate(y, seed)


def finite_n_variance(params: GPNeuronParams, input: GaussianScalar, n):
    """Exact Var[y] for the n-point average, which exceeds the closed-form
    variance by an O(1/n) term:

        Var[y] = V + (E[S(x, x)] + Var[m(x)] - V) / n

    where V is the closed-form variance, S the posterior covariance and m
    the posterior mean.  Both expectations are Gaussian integrals of
    products of two SE kernels.
    """
    z, l, s = params.z, params.l, params.s
    mu, v = input.mean, input.variance
    zbar = 0.5 * (z[:, None] + z[None, :])
    w = l * l + 2.0 * v
    Q = s ** 4 * np.exp(-(z[:, None] - z[None, :]) ** 2 / (4.0 * l * l)) * math.sqrt(l * l / w) \
        * np.exp(-(mu - zbar) ** 2 / w)
    cache = posterior_cache(params)
    L = cache.factor.lower
    Li_Q = scipy.linalg.solve_triangular(L, Q, lower=True)
    trace = float(np.trace(scipy.linalg.solve_triangular(L, Li_Q.T, lower=True)))
    exact = neuron_forward(params, input)
    diag = s * s - trace
    spread = float(cache.alpha @ Q @ cache.alpha) - exact.mean ** 2
    return exact.variance + (diag + spread - exact.variance) / n


def random_neuron(rng, n_inducing=10, l_range=(0.3, 0.8), s_range=(0.5, 1.5), sn2=1e-2):
    """Neuron with evenly spaced z on [-1, 1] and random h, l, s."""
    return GPNeuronParams(
        z=np.linspace(-1.0, 1.0, n_inducing),
        h=rng.normal(0.0, 1.0, n_inducing),
        l=float(rng.uniform(*l_range)),
        s=float(rng.uniform(*s_range)),
        sn2=sn2,
    )


DEFAULT_MEANS = (-1.0, -0.5, 0.0, 0.5, 1.0)
DEFAULT_VARIANCES = (0.0, 0.01, 0.05, 0.2, 0.5)
CSV_FIELDS = ("config", "mu_x", "var_x", "l", "s", "sn2", "analytic_mean", "analytic_var", "finite_n_var",
              "mc_mean", "mc_var", "se_mean", "se_var", "mean_ok", "var_ok")


def run_grid(means=DEFAULT_MEANS, variances=DEFAULT_VARIANCES, n=1000, n_trials=20000, seed=0,
             method="marginal", band=3.0):
    """Compare closed form and MC over a (mu_x, var_x) grid, one random neuron per point.

    ``finite_n_var`` is the exact variance of an ``n``-point average, the
    quantity the MC variance actually estimates (see :func:`finite_n_variance`).
    """
    rows = []
    rng = np.random.default_rng(seed)
    k = 0
    for mu in means:
        for var in variances:
            params = random_neuron(rng)
            inp = GaussianScalar(float(mu), float(var))
            exact = neuron_forward(params, inp)
            est = mc_neuron_moments(params, inp, n, n_trials, seed=seed * 1000 + k, method=method)
            rows.append({
                "config": k, "mu_x": mu, "var_x": var, "l": params.l, "s": params.s, "sn2": params.sn2,
                "analytic_mean": exact.mean, "analytic_var": exact.variance,
                "finite_n_var": finite_n_variance(params, inp, n),
                "mc_mean": est.mean_hat, "mc_var": est.var_hat,
                "se_mean": est.se_mean, "se_var": est.se_var,
                "mean_ok": abs(exact.mean - est.mean_hat) <= band * est.se_mean,
                "var_ok": abs(exact.variance - est.var_hat) <= band * est.se_var,
            })
            k += 1
    return rows


def write_csv(rows, fh):
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        for key in ("l", "s", "sn2", "analytic_mean", "analytic_var", "finite_n_var", "mc_mean", "mc_var",
                    "se_mean", "se_var"):
            out[key] = f"{out[key]:.17g}"
        out["mean_ok"] = int(out["mean_ok"])
        out["var_ok"] = int(out["var_ok"])
        writer.writerow(out)


__all__ = ["MCEstimate", "MCFactorError", "mc_neuron_moments", "kernel_total", "finite_n_variance", "random_neuron",
           "run_grid", "write_csv"]
