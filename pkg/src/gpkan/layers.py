"""Layers over independent-Gaussian tensors and the layer graph.

Batched tensors travel as a ``(mean, var)`` pair of arrays (or tape
:class:`~gpkan.autodiff.Var` s) with a leading batch axis: ``(B, n)`` for
vectors, ``(B, C, H, W)`` for images.  Each layer's ``forward`` takes the pair
plus a mapping from its local parameter names to arrays or Vars, which is how
the same code serves plain evaluation and taped training.

Patch vectors produced by :func:`im2col` are channel-major, then row-major
within the kernel window; output locations are row-major.  Checkpoints depend
on this order.
"""
from __future__ import annotations

import logging
import math

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .gaussian_core import CLAMP_WARN, GaussianImage, GaussianVector
from .gp_neuron import DEFAULT_H_SCALE, DEFAULT_LAMBDA, GPNeuronParams, init_inducing
from .linalg import NotPositiveDefinite

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def _pair(v):
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ValueError(f"expected an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ------------------------------------------------------------------- FCGP

def fcgp_moments(mean, var, z, h, log_l, log_s, raw_sn2, lam=DEFAULT_LAMBDA, where="fcgp", dedupe=False):
    """Push a batch of Gaussian vectors through an m x n grid of GP neurons.

    mean, var: (N, n).  z, h: (m, n, p).  log_l, log_s, raw_sn2: (m, n).
    Returns output (mean, var), each (N, m).  Works on arrays or tape Vars.

    ``dedupe`` is for data inputs: a constant mean array whose variance is
    one shared value.  When the mean takes few distinct values, neurons
    are evaluated once per value and the results gathered, which gives the
    same moments.  Gradients reaching ``var`` are then only correct in
    total, which is all a single shared variance needs.
    """
    M, n, p = np.shape(ad.value(z))
    N = np.shape(ad.value(mean))[0]
    if np.shape(ad.value(mean))[1] != n:
        raise DimensionError(f"{where}: input length {np.shape(ad.value(mean))[1]} != in_dim {n}")

    l = ad.exp(log_l)
    s = ad.exp(log_s)
    sn2 = ad.add(lam, ad.softplus(raw_sn2))
    s2 = ad.square(s)
    l2 = ad.square(l)

    dz = ad.sub(ad.reshape(z, (M, n, p, 1)), ad.reshape(z, (M, n, 1, p)))
    K = ad.mul(
        ad.reshape(s2, (M, n, 1, 1)),
        ad.exp(ad.div(ad.neg(ad.square(dz)), ad.mul(2.0, ad.reshape(l2, (M, n, 1, 1))))),
    )
    K = ad.add(K, ad.mul(ad.reshape(sn2, (M, n, 1, 1)), np.eye(p)))
    try:
        alpha = ad.psd_solve(K, h)
    except NotPositiveDefinite as exc:
        i, j = exc.index[:2] if exc.index else (None, None)
        raise NotPositiveDefinite(f"{where}: kernel matrix of neuron ({i}, {j}) is not positive definite ({exc})",
                                  index=exc.index, pivot=exc.pivot) from exc

    mv, vv = ad.value(mean), ad.value(var)
    table = None
    if dedupe and N and not getattr(mean, "requires_grad", False) and np.ptp(vv) == 0.0:
        levels, inv = np.unique(mv, return_inverse=True)
        U = levels.size
        if 2 * U <= N:
            table = (U, inv.reshape(N, n))
    if table is None:
        mT = ad.transpose(mean, (1, 0))
        vT = ad.transpose(var, (1, 0))
    else:
        # Every input shares one variance, so each neuron only needs to be
        # evaluated at the distinct input means.
        U, inv = table
        mT = np.broadcast_to(levels, (n, U))
        first = np.zeros(n * U, dtype=np.intp)
        vT = ad.reshape(ad.gather_columns(ad.reshape(var, (1, -1)), first, _scatter_matrix(first, N * n)), (n, U))

    kq = ad.smoothed_kernel(mT, vT, z, l, s)
    per_mean = ad.kernel_mean(kq, alpha)
    l3 = ad.reshape(l, (M, n, 1))
    red = ad.mul(ad.reshape(s2, (M, n, 1)), ad.div(l3, ad.sqrt(ad.add(ad.reshape(l2, (M, n, 1)), ad.mul(2.0, vT)))))
    blue = ad.psd_quad(K, kq)
    raw_var = ad.sub(red, blue)
    worst = float(np.min(ad.value(raw_var))) if N else 0.0
    if worst < -CLAMP_WARN:
        log.warning("%s: variance clamp of %.3e exceeds %.0e", where, worst, CLAMP_WARN)
    per_var = ad.clamp_min(raw_var)
    if table is None:
        out_mean = ad.sum(per_mean, axis=1)
        out_var = ad.sum(per_var, axis=1)
    else:
        cols = (np.arange(n)[None, :] * U + inv).ravel()
        rows = np.repeat(np.arange(N), n)
        scatter = sp.csr_matrix((np.ones(N * n), (rows, cols)), shape=(N, n * U))
        out_mean = ad.table_sum(per_mean, inv, scatter)
        out_var = ad.table_sum(per_var, inv, scatter)
    return ad.transpose(out_mean, (1, 0)), ad.transpose(out_var, (1, 0))


class Layer:
    kind = "layer"
    params = None

    def init_params(self, rng):
        return {}

    def initialize(self, rng):
        """Give a standalone layer its own parameters (networks keep theirs centrally)."""
        self.params = self.init_params(rng)
        return self

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, mean, var, params):
        raise NotImplementedError

    def describe(self):
        raise NotImplementedError

    def n_neurons(self):
        return 0


class FCGPLayer(Layer):
    kind = "fcgp"

    def __init__(self, in_dim, out_dim, n_inducing=10, lam=DEFAULT_LAMBDA, sn2_init=1e-2, h_scale=DEFAULT_H_SCALE):
        if in_dim < 1 or out_dim < 1 or n_inducing < 1:
            raise ValueError("FCGP dimensions must be positive")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.n_inducing = int(n_inducing)
        self.lam = float(lam)
        self.sn2_init = float(sn2_init)
        self.h_scale = resolve_h_scale(h_scale, self.in_dim)
        self.evaluations = 0

    @property
    def shape(self):
        return (self.out_dim, self.in_dim)

    def init_params(self, rng):
        z, h, l, s = init_inducing(self.shape, self.n_inducing, rng, h_scale=self.h_scale)
        raw = np.full(self.shape, float(softplus_inverse(max(self.sn2_init - self.lam, 1e-12))))
        return {"z": z, "h": h, "log_l": np.log(l), "log_s": np.log(s), "raw_sn2": raw}

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise DimensionError(f"fcgp expects input ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def forward(self, mean, var, params, where="fcgp", dedupe=False):
        N = np.shape(ad.value(mean))[0]
        self.evaluations += self.out_dim * self.in_dim * N
        return fcgp_moments(mean, var, params["z"], params["h"], params["log_l"], params["log_s"],
                            params["raw_sn2"], self.lam, where=where, dedupe=dedupe)

    def neuron(self, params, i, j) -> GPNeuronParams:
        raw = float(params["raw_sn2"][i, j])
        return GPNeuronParams(
            z=params["z"][i, j], h=params["h"][i, j],
            l=math.exp(params["log_l"][i, j]), s=math.exp(params["log_s"][i, j]),
            sn2=self.lam + float(np.logaddexp(0.0, raw)),
        )

    def n_neurons(self):
        return self.out_dim * self.in_dim

    def describe(self):
        return {"fcgp": {"in": self.in_dim, "out": self.out_dim, "inducing": self.n_inducing}}


# ----------------------------------------------------------- im2col/col2im

def conv_output_size(h, w, kernel, stride):
    kh, kw = kernel
    sh, sw = stride
    if kh < 1 or kw < 1 or sh < 1 or sw < 1:
        raise GeometryError("kernel and stride must be positive")
    if kh > h or kw > w:
        raise GeometryError(f"kernel {kh}x{kw} exceeds image {h}x{w}")
    return (h - kh) // sh + 1, (w - kw) // sw + 1


def im2col_index(channels, height, width, kernel, stride):
    """Flat-pixel index map of shape (out_h*out_w, channels*kh*kw)."""
    kh, kw = kernel
    sh, sw = stride
    oh, ow = conv_output_size(height, width, kernel, stride)
    c = np.arange(channels)[:, None, None]
    di = np.arange(kh)[None, :, None]
    dj = np.arange(kw)[None, None, :]
    patch = (c * height * width + di * width + dj).ravel()
    origin = (np.arange(oh)[:, None] * sh * width + np.arange(ow)[None, :] * sw).ravel()
    return origin[:, None] + patch[None, :]


def _scatter_matrix(index, size):
    rows = np.arange(index.size)
    return sp.csr_matrix((np.ones(index.size), (rows, index.ravel())), shape=(index.size, size))


def im2col(img: GaussianImage, kernel_h, kernel_w, stride_h, stride_w):
    """Patch vectors of a Gaussian image, one per output location (row-major)."""
    idx = im2col_index(img.channels, img.height, img.width, (kernel_h, kernel_w), (stride_h, stride_w))
    m = img.mean.ravel()[idx]
    v = img.variance.ravel()[idx]
    return [GaussianVector(m[k], v[k]) for k in range(idx.shape[0])]


def col2im(batch, out_channels, out_h, out_w) -> GaussianImage:
    """Inverse arrangement: pixel (c, i, j) = batch[i*out_w + j][c]."""
    batch = list(batch)
    if len(batch) != out_h * out_w:
        raise DimensionError(f"col2im needs {out_h * out_w} vectors, got {len(batch)}")
    if any(len(v) != out_channels for v in batch):
        raise DimensionError(f"col2im vectors must have length {out_channels}")
    m = np.stack([v.mean for v in batch]).T.reshape(out_channels, out_h, out_w)
    s = np.stack([v.variance for v in batch]).T.reshape(out_channels, out_h, out_w)
    return GaussianImage(m, s)


# ------------------------------------------------------------------ ConvGP

class ConvGPLayer(Layer):
    """One FCGP (or two in series) slid over im2col patches, shared across positions."""

    kind = "convgp"

    def __init__(self, kernel, stride, in_channels, out_channels, hidden=None, n_inducing=10,
                 lam=DEFAULT_LAMBDA, sn2_init=1e-2, n_inner=None, h_scale=DEFAULT_H_SCALE):
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.hidden = None if hidden in (None, 0) else int(hidden)
        if n_inner not in (None, 1, 2):
            raise ValueError(f"a ConvGP kernel has 1 or 2 inner layers, got {n_inner}")
        if n_inner == 1 and self.hidden is not None:
            raise ValueError("hidden width given for a single inner layer")
        if n_inner == 2 and self.hidden is None:
            self.hidden = 2 * self.out_channels
        self.n_inducing = int(n_inducing)
        patch = self.kernel[0] * self.kernel[1] * self.in_channels
        if self.hidden is None:
            self.inner = [FCGPLayer(patch, self.out_channels, n_inducing, lam, sn2_init, h_scale)]
        else:
            self.inner = [FCGPLayer(patch, self.hidden, n_inducing, lam, sn2_init, h_scale),
                          FCGPLayer(self.hidden, self.out_channels, n_inducing, lam, sn2_init, h_scale)]
        self._index_cache = {}

    def init_params(self, rng):
        out = {}
        for k, layer in enumerate(self.inner):
            for name, arr in layer.init_params(rng).items():
                out[f"inner{k}.{name}"] = arr
        return out

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(f"convgp expects ({self.in_channels}, H, W), got {tuple(in_shape)}")
        oh, ow = conv_output_size(in_shape[1], in_shape[2], self.kernel, self.stride)
        return (self.out_channels, oh, ow)

    def _index(self, in_shape):
        key = tuple(in_shape)
        if key not in self._index_cache:
            idx = im2col_index(*key, self.kernel, self.stride)
            self._index_cache[key] = (idx, _scatter_matrix(idx, int(np.prod(key))))
        return self._index_cache[key]

    def forward(self, mean, var, params, dedupe=False):
        B = np.shape(ad.value(mean))[0]
        in_shape = np.shape(ad.value(mean))[1:]
        C, oh, ow = self.out_shape(in_shape)
        idx, scatter = self._index(in_shape)
        L, K = idx.shape
        m = ad.reshape(ad.gather_columns(ad.reshape(mean, (B, -1)), idx, scatter), (B * L, K))
        v = ad.reshape(ad.gather_columns(ad.reshape(var, (B, -1)), idx, scatter), (B * L, K))
        for k, layer in enumerate(self.inner):
            local = {name: params[f"inner{k}.{name}"] for name in ("z", "h", "log_l", "log_s", "raw_sn2")}
            m, v = layer.forward(m, v, local, where=f"convgp.inner{k}", dedupe=dedupe and k == 0)

        def back(x):
            x = ad.transpose(ad.reshape(x, (B, L, C)), (0, 2, 1))
            return ad.reshape(x, (B, C, oh, ow))

        return back(m), back(v)

    def n_neurons(self):
        return sum(layer.n_neurons() for layer in self.inner)

    def describe(self):
        d = {"kernel": list(self.kernel), "stride": list(self.stride), "in_ch": self.in_channels,
             "out_ch": self.out_channels, "inducing": self.n_inducing}
        if self.hidden is not None:
            d["hidden"] = self.hidden
        return {"convgp": d}


# ------------------------------------------------------ pooling and friends

class AvgPoolLayer(Layer):
    kind = "avgpool"

    def __init__(self, window):
        self.window = _pair(window)

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"avgpool expects an image, got {tuple(in_shape)}")
        C, H, W = in_shape
        wh, ww = self.window
        if wh < 1 or ww < 1 or H % wh or W % ww:
            raise GeometryError(f"pool window {wh}x{ww} does not tile {H}x{W} without overlap")
        return (C, H // wh, W // ww)

    def forward(self, mean, var, params):
        B = np.shape(ad.value(mean))[0]
        C, oh, ow = self.out_shape(np.shape(ad.value(mean))[1:])
        wh, ww = self.window
        k = wh * ww

        def pool(x):
            return ad.sum(ad.reshape(x, (B, C, oh, wh, ow, ww)), axis=(3, 5))

        return ad.mul(pool(mean), 1.0 / k), ad.mul(pool(var), 1.0 / (k * k))

    def describe(self):
        return {"avgpool": {"window": list(self.window)}}


class NormalizeLayer(Layer):
    kind = "normalize"

    def forward(self, mean, var, params):
        return ad.tanh(mean), ad.sigmoid(ad.sub(var, ad.square(mean)))

    def describe(self):
        return {"normalize": {}}


class FlattenLayer(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, mean, var, params):
        B = np.shape(ad.value(mean))[0]
        return ad.reshape(mean, (B, -1)), ad.reshape(var, (B, -1))

    def describe(self):
        return {"flatten": {}}


# ------------------------------------------------ single-sample public API

def _params_of(layer, params):
    params = layer.params if params is None else params
    if params is None:
        raise ValueError(f"{layer.kind} layer has no parameters; call initialize() or pass params")
    return params


def fcgp_forward(layer: FCGPLayer, x: GaussianVector, params=None) -> GaussianVector:
    if len(x) != layer.in_dim:
        raise DimensionError(f"input length {len(x)} != in_dim {layer.in_dim}")
    m, v = layer.forward(x.mean[None, :], x.variance[None, :], _params_of(layer, params))
    return GaussianVector(ad.value(m)[0], ad.value(v)[0])


def convgp_forward(layer: ConvGPLayer, img: GaussianImage, params=None) -> GaussianImage:
    m, v = layer.forward(img.mean[None], img.variance[None], _params_of(layer, params))
    return GaussianImage(ad.value(m)[0], ad.value(v)[0])


def avgpool_forward(layer: AvgPoolLayer, img: GaussianImage) -> GaussianImage:
    m, v = layer.forward(img.mean[None], img.variance[None], {})
    return GaussianImage(ad.value(m)[0], ad.value(v)[0])


def normalize_layer_forward(x):
    m, v = NormalizeLayer().forward(x.mean[None], x.variance[None], {})
    return type(x)(ad.value(m)[0], ad.value(v)[0])


# ------------------------------------------------------------- layer graph

class SpecError(ValueError):
    """Model description is malformed or its layer dimensions do not chain."""


def resolve_h_scale(h_scale, fan_in):
    """Standard deviation of the initial inducing values.

    A number is used as is.  ``"fan_in"`` gives 1/sqrt(fan_in), which keeps
    the sum over a neuron's inputs at unit scale however wide the layer is.
    """
    if h_scale == "fan_in":
        return 1.0 / math.sqrt(fan_in)
    if isinstance(h_scale, bool) or not isinstance(h_scale, (int, float)) or not h_scale >= 0:
        raise ValueError(f"h_scale must be a nonnegative number or 'fan_in', got {h_scale!r}")
    return float(h_scale)


def _layer_from_descriptor(desc, lam, sn2_init, h_scale=DEFAULT_H_SCALE):
    if not isinstance(desc, dict) or len(desc) != 1:
        raise SpecError(f"layer descriptor must be a single-key object, got {desc!r}")
    (kind, cfg), = desc.items()
    cfg = cfg or {}
    h_scale = cfg.get("h_scale", h_scale)
    try:
        if kind == "fcgp":
            return FCGPLayer(cfg["in"], cfg["out"], cfg.get("inducing", 10), lam, sn2_init, h_scale)
        if kind == "convgp":
            return ConvGPLayer(cfg["kernel"], cfg.get("stride", 1), cfg["in_ch"], cfg["out_ch"],
                               cfg.get("hidden"), cfg.get("inducing", 10), lam, sn2_init, cfg.get("inner"), h_scale)
        if kind == "avgpool":
            return AvgPoolLayer(cfg["window"])
        if kind == "normalize":
            return NormalizeLayer()
        if kind == "flatten":
            return FlattenLayer()
    except KeyError as exc:
        raise SpecError(f"{kind} layer is missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise SpecError(f"bad {kind} layer: {exc}") from None
    raise SpecError(f"unknown layer kind {kind!r}")


class Network:
    """Ordered layer graph with named parameters.

    Parameters live in ``self.params`` as raw (unconstrained) float64 arrays
    keyed ``"<layer>.<name>"``, plus ``"input_log_var"`` when the input
    variance is learnable.
    """

    def __init__(self, spec, seed=0):
        self.spec = _validated_spec(spec)
        self.lam = float(self.spec.get("lambda", DEFAULT_LAMBDA))
        sn2_init = float(self.spec.get("sn2_init", 1e-2))
        self.input_shape = tuple(self.spec["input"])
        h_scale = self.spec.get("h_scale", DEFAULT_H_SCALE)
        self.layers = [_layer_from_descriptor(d, self.lam, sn2_init, h_scale) for d in self.spec["layers"]]
        shape = self.input_shape
        self.shapes = [shape]
        for k, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except (GeometryError, DimensionError) as exc:
                raise SpecError(f"layer {k} ({layer.kind}): {exc}") from None
            self.shapes.append(shape)
        self.output_shape = shape
        if "classes" in self.spec and self.spec["classes"] is not None and shape != (self.spec["classes"],):
            raise SpecError(f"network output {shape} does not match classes={self.spec['classes']}")

        self.train_state = None
        self.loss_curve = []
        rng = np.random.default_rng(seed)
        self.params = {}
        for k, layer in enumerate(self.layers):
            for name, arr in layer.init_params(rng).items():
                self.params[f"{k}.{name}"] = np.asarray(arr, dtype=np.float64)
        iv = self.spec.get("input_variance")
        if iv is not None:
            self.params["input_log_var"] = np.array(math.log(float(iv)))

    @property
    def n_classes(self):
        return self.spec.get("classes")

    @property
    def learns_input_variance(self):
        return "input_log_var" in self.params

    def n_parameters(self):
        return int(sum(a.size for a in self.params.values()))

    def n_neurons(self):
        return sum(layer.n_neurons() for layer in self.layers)

    def layer_params(self, k, params=None):
        params = self.params if params is None else params
        prefix = f"{k}."
        return {name[len(prefix):]: v for name, v in params.items() if name.startswith(prefix)}

    def input_variance(self, params=None):
        params = self.params if params is None else params
        if "input_log_var" not in params:
            return None
        return ad.exp(params["input_log_var"])

    def forward(self, x, params=None):
        """Output (mean, var) for a batch of deterministic input means ``x``."""
        params = self.params if params is None else params
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"input batch shape {x.shape[1:]} != model input {self.input_shape}")
        if x.shape[0] == 0:
            raise DimensionError("empty batch")
        iv = self.input_variance(params)
        var = np.zeros_like(x) if iv is None else ad.mul(np.ones_like(x), iv)
        mean = x
        for k, layer in enumerate(self.layers):
            extra = {"dedupe": True} if k == 0 and layer.kind in ("fcgp", "convgp") else {}
            mean, var = layer.forward(mean, var, self.layer_params(k, params), **extra)
        return mean, var

    def predict(self, x, batch_size=256):
        means, variances = [], []
        for i in range(0, len(x), batch_size):
            m, v = self.forward(x[i:i + batch_size])
            means.append(ad.value(m))
            variances.append(ad.value(v))
        return np.concatenate(means), np.concatenate(variances)

    def describe(self):
        return dict(self.spec)


def _validated_spec(spec):
    if not isinstance(spec, dict):
        raise SpecError("model spec must be a JSON object")
    if "input" not in spec or "layers" not in spec:
        raise SpecError("model spec needs 'input' and 'layers'")
    inp = spec["input"]
    if isinstance(inp, int):
        inp = [inp]
    if not isinstance(inp, (list, tuple)) or not inp or not all(isinstance(d, int) and d > 0 for d in inp):
        raise SpecError(f"bad input geometry {spec['input']!r}")
    if not isinstance(spec["layers"], list):
        raise SpecError("'layers' must be a list")
    out = dict(spec)
    out["input"] = list(inp)
    return out
