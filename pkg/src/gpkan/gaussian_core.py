"""Independent Gaussian values and the closed-form algebra on them.

Every quantity flowing between GP-KAN layers is an independent Gaussian,
stored as a ``(mean, variance)`` pair.  Containers keep means and variances
in two parallel float64 arrays; no covariance is ever stored.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

# clamps larger than this are reported as numerical-health warnings
CLAMP_WARN = 1e-8


class DomainError(ValueError):
    """Input lies outside the open domain of an inverse map."""


def clamp_variance(v, where="variance"):
    """Clamp a (mathematically nonnegative) variance at zero.

    Works on floats and arrays.  Negative excursions beyond ``CLAMP_WARN``
    are logged since they point at cancellation trouble upstream.
    """
    arr = np.asarray(v, dtype=np.float64)
    worst = float(arr.min()) if arr.size else 0.0
    if worst < -CLAMP_WARN:
        log.warning("%s clamp of %.3e exceeds %.0e", where, worst, CLAMP_WARN)
    out = np.maximum(arr, 0.0)
    if np.ndim(v) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class GaussianScalar:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.variance)):
            raise ValueError(f"non-finite Gaussian ({self.mean}, {self.variance})")
        if self.variance < 0:
            raise ValueError(f"negative variance {self.variance}")

    def __iter__(self):
        yield self.mean
        yield self.variance

    def __add__(self, other):
        return gaussian_add(self, other)


class _GaussianArray:
    """Shared behaviour of array-backed Gaussian containers."""

    def __init__(self, mean, variance):
        mean = np.array(mean, dtype=np.float64)
        variance = np.array(variance, dtype=np.float64)
        if mean.shape != variance.shape:
            raise ValueError(f"mean shape {mean.shape} != variance shape {variance.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(variance))):
            raise ValueError("non-finite entries in Gaussian container")
        if np.any(variance < 0):
            raise ValueError("negative variance in Gaussian container")
        mean.setflags(write=False)
        variance.setflags(write=False)
        self.mean = mean
        self.variance = variance

    def scalar(self, index) -> GaussianScalar:
        return GaussianScalar(float(self.mean[index]), float(self.variance[index]))

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.mean.shape == other.mean.shape
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.variance, other.variance)
        )

    __hash__ = None


class GaussianVector(_GaussianArray):
    """Length-n sequence of mutually independent Gaussians."""

    def __init__(self, mean, variance):
        super().__init__(mean, variance)
        if self.mean.ndim != 1:
            raise ValueError("GaussianVector needs 1-d arrays")

    @classmethod
    def from_scalars(cls, scalars):
        scalars = list(scalars)
        return cls([g.mean for g in scalars], [g.variance for g in scalars])

    def __len__(self):
        return self.mean.shape[0]

    def __getitem__(self, i) -> GaussianScalar:
        return self.scalar(i)

    def __iter__(self):
        for i in range(len(self)):
            yield self.scalar(i)

    def __repr__(self):
        return f"GaussianVector(n={len(self)})"


class GaussianImage(_GaussianArray):
    """channels x height x width grid of independent Gaussians (row-major)."""

    def __init__(self, mean, variance):
        super().__init__(mean, variance)
        if self.mean.ndim != 3:
            raise ValueError("GaussianImage needs (channels, height, width) arrays")

    @property
    def channels(self):
        return self.mean.shape[0]

    @property
    def height(self):
        return self.mean.shape[1]

    @property
    def width(self):
        return self.mean.shape[2]

    @property
    def shape(self):
        return self.mean.shape

    def pixel(self, c, i, j) -> GaussianScalar:
        return self.scalar((c, i, j))

    def flatten(self) -> GaussianVector:
        return GaussianVector(self.mean.ravel(), self.variance.ravel())

    def __repr__(self):
        return f"GaussianImage{self.shape}"


def gaussian_add(a: GaussianScalar, b: GaussianScalar) -> GaussianScalar:
    """Sum of two independent Gaussians."""
    return GaussianScalar(a.mean + b.mean, a.variance + b.variance)


def gaussian_scale(a: GaussianScalar, c: float) -> GaussianScalar:
    return GaussianScalar(c * a.mean, c * c * a.variance)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def normalize_arrays(mean, variance):
    """Elementwise bounding bijection on (mean, variance) arrays.

    mean -> tanh(mean), variance -> sigmoid(variance - mean**2).
    """
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    return np.tanh(mean), sigmoid(variance - mean * mean)


def normalize(x: GaussianScalar) -> GaussianScalar:
    """Map an unbounded Gaussian to one with mean in (-1, 1), variance in (0, 1).

    Saturating inputs may round to the closed interval ends in float64; the
    open-interval statement holds for moderate arguments.
    """
    m, v = normalize_arrays(x.mean, x.variance)
    return GaussianScalar(float(m), float(v))


def denormalize_arrays(mean, variance):
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if np.any(~(np.abs(mean) < 1.0)) or np.any(~((variance > 0.0) & (variance < 1.0))):
        raise DomainError("denormalize needs mean in (-1, 1) and variance in (0, 1)")
    m = np.arctanh(mean)
    v = logit(variance) + m * m
    # the image of [0, inf) variances is only part of the open box
    tol = 1e-12 * (1.0 + m * m)
    if np.any(v < -tol):
        raise DomainError("point has no preimage with nonnegative variance")
    return m, np.maximum(v, 0.0)


def denormalize(y: GaussianScalar) -> GaussianScalar:
    """Inverse of :func:`normalize`; raises DomainError off the open box."""
    m, v = denormalize_arrays(y.mean, y.variance)
    return GaussianScalar(float(m), float(v))
