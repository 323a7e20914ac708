"""A single GP neuron: a univariate zero-mean GP with an SE kernel,
conditioned on trainable inducing points ``(z, h)``.

``neuron_forward`` pushes a Gaussian input through the neuron by taking the
function inner product of a posterior sample with the input density.  The
result is Gaussian with closed-form moments

    mean = kq . (K + sn2 I)^{-1} h
    var  = s^2 l / sqrt(l^2 + 2 var_x) - kq . (K + sn2 I)^{-1} kq

where ``kq_i = s^2 l / sqrt(l^2 + var_x) * exp(-(mu_x - z_i)^2 / (2 (l^2 + var_x)))``
is the SE kernel smoothed by the input density (equal to
``sqrt(2 pi) s^2 l N(mu_x | z_i, var_x + l^2)``).  With ``var_x = 0`` this is the
ordinary GP predictive posterior.

The functions here are the scalar reference path.  The vectorized, taped
version used by the layers lives in :mod:`gpkan.layers`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian_core import GaussianScalar, clamp_variance
from .linalg import CholeskyFactor, cholesky, quad_form, solve_psd

SQRT_2PI = math.sqrt(2.0 * math.pi)
DEFAULT_LAMBDA = 1e-6
DEFAULT_H_SCALE = 0.5


@dataclass(frozen=True)
class GPNeuronParams:
    z: np.ndarray
    h: np.ndarray
    l: float
    s: float
    sn2: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64).ravel()
        h = np.asarray(self.h, dtype=np.float64).ravel()
        if z.shape != h.shape or z.size < 1:
            raise ValueError(f"z and h must be equal-length and non-empty, got {z.size} and {h.size}")
        if not (self.l > 0 and self.s > 0):
            raise ValueError(f"kernel scales must be positive, got l={self.l}, s={self.s}")
        if not self.sn2 > 0:
            raise ValueError(f"inducing noise must be positive, got {self.sn2}")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "h", h)

    @property
    def n_inducing(self):
        return self.z.size

    def check_floor(self, lam=DEFAULT_LAMBDA):
        if self.sn2 < lam:
            raise ValueError(f"sn2={self.sn2} below floor {lam}")


@dataclass(frozen=True)
class GPPosteriorCache:
    factor: CholeskyFactor
    alpha: np.ndarray


def kernel_se(x, xp, l, s):
    """Squared-exponential covariance s^2 exp(-(x - x')^2 / (2 l^2))."""
    d = np.subtract(x, xp)
    return s * s * np.exp(-d * d / (2.0 * (l * l)))


def normal_pdf(x, mean, var):
    d = np.subtract(x, mean)
    return np.exp(-d * d / (2.0 * var)) / np.sqrt(2.0 * np.pi * var)


def gram(params: GPNeuronParams):
    """K_hh + sn2 I."""
    z = params.z
    K = kernel_se(z[:, None], z[None, :], params.l, params.s)
    return K + params.sn2 * np.eye(z.size)


def posterior_cache(params: GPNeuronParams) -> GPPosteriorCache:
    factor = cholesky(gram(params))
    return GPPosteriorCache(factor, solve_psd(factor, params.h))


def smoothed_kernel_vector(params: GPNeuronParams, input: GaussianScalar):
    """q_i = N(mu_x | z_i, var_x + l^2) for every inducing location."""
    return normal_pdf(input.mean, params.z, input.variance + params.l ** 2)


def gp_posterior(params: GPNeuronParams, x: float, cache: GPPosteriorCache | None = None) -> GaussianScalar:
    """Predictive posterior at a deterministic location (zero prior mean)."""
    cache = cache or posterior_cache(params)
    k = kernel_se(x, params.z, params.l, params.s)
    mean = float(k @ cache.alpha)
    var = params.s ** 2 - float(quad_form(cache.factor, k, k))
    return GaussianScalar(mean, clamp_variance(var, "gp_posterior"))


def smoothed_kernel(mu, var, z, l, s):
    """sqrt(2 pi) s^2 l N(mu | z, var + l^2), written so var = 0 gives kernel_se."""
    t = l * l + var
    d = np.subtract(mu, z)
    return s * s * (l / np.sqrt(t)) * np.exp(-d * d / (2.0 * t))


def neuron_forward(params: GPNeuronParams, input: GaussianScalar, cache: GPPosteriorCache | None = None) -> GaussianScalar:
    cache = cache or posterior_cache(params)
    l, s = params.l, params.s
    kq = smoothed_kernel(input.mean, input.variance, params.z, l, s)
    mean = float(kq @ cache.alpha)
    red = s * s * (l / math.sqrt(l * l + 2.0 * input.variance))
    blue = float(quad_form(cache.factor, kq, kq))
    return GaussianScalar(mean, clamp_variance(red - blue, "neuron_forward"))


def init_inducing(shape, n_inducing, rng, lo=-1.0, hi=1.0, h_scale=DEFAULT_H_SCALE):
    """Initial (z, h, l, s) arrays for a grid of neurons of the given shape.

    z is evenly spaced on [lo, hi], h ~ N(0, h_scale^2), l is the z spacing
    and s = 1.
    """
    shape = tuple(shape)
    z = np.broadcast_to(np.linspace(lo, hi, n_inducing), shape + (n_inducing,)).copy()
    h = rng.normal(0.0, h_scale, size=shape + (n_inducing,))
    spacing = (hi - lo) / max(n_inducing - 1, 1)
    l = np.full(shape, spacing)
    s = np.ones(shape)
    return z, h, l, s
