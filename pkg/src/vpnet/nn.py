"""Feedforward layers with hand-derived forward and backward passes.

Arrays are batch-first.  Every ``*_forward`` helper returns the output and
whatever the matching ``*_backward`` needs; :class:`Layer` objects hold flat
parameter vectors plus that cache.  Flat parameter order per layer kind
(also the checkpoint order):

* ``vp_feature`` / ``vp_filter``: ``[tau, lam]``
* ``fully_connected``: weights (out x in, row-major), then biases (out)
* ``conv1d``: kernels (out_ch x in_ch x width, row-major), then biases (out_ch)
* ``relu``, ``softmax``, ``pool_mean``, ``pool_max``: none
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import vp
from .errors import ContractError
from .hermite import SampleGrid, VpParams, adaptive_hermite

LAYER_KINDS = (
    "vp_feature",
    "vp_filter",
    "fully_connected",
    "relu",
    "softmax",
    "conv1d",
    "pool_mean",
    "pool_max",
)


@dataclass(frozen=True)
class LayerSpec:
    """Kind plus kind-specific sizes (``dims``) and initialization hints (``init``).

    dims by kind:
      vp_*: m, n, a, b      fully_connected: inputs, outputs
      relu/softmax: size    conv1d: length, in_channels, out_channels, width
      pool_*: channels, length, size
    """

    kind: str
    dims: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def in_shape(self) -> tuple[int, ...]:
        d = self.dims
        if self.kind.startswith("vp_"):
            return (d["m"],)
        if self.kind == "fully_connected":
            return (d["inputs"],)
        if self.kind in ("relu", "softmax"):
            return (d["size"],)
        if self.kind == "conv1d":
            return (d["in_channels"], d["length"])
        return (d["channels"], d["length"])

    @property
    def out_shape(self) -> tuple[int, ...]:
        d = self.dims
        if self.kind == "vp_feature":
            return (d["n"],)
        if self.kind == "vp_filter":
            return (d["m"],)
        if self.kind == "fully_connected":
            return (d["outputs"],)
        if self.kind in ("relu", "softmax"):
            return (d["size"],)
        if self.kind == "conv1d":
            return (d["out_channels"], d["length"])
        return (d["channels"], d["length"] // d["size"])

    @property
    def n_params(self) -> int:
        d = self.dims
        if self.kind.startswith("vp_"):
            return 2
        if self.kind == "fully_connected":
            return d["outputs"] * d["inputs"] + d["outputs"]
        if self.kind == "conv1d":
            return d["out_channels"] * (d["in_channels"] * d["width"] + 1)
        return 0


@dataclass
class GradientBundle:
    d_input: np.ndarray
    d_params: np.ndarray


# -- elementwise and affine layers -------------------------------------------


def fc_forward(x, weights, bias):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ValueError(f"fully connected shapes do not match: x {x.shape}, W {weights.shape}, b {bias.shape}")
    return x @ weights.T + bias


def fc_backward(upstream, x, weights):
    """Returns (d_x, d_weights, d_bias); batch gradients are summed over rows."""
    upstream = np.asarray(upstream, dtype=float)
    d_x = upstream @ weights
    if upstream.ndim == 1:
        return d_x, np.outer(upstream, x), upstream.copy()
    return d_x, upstream.T @ x, upstream.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(upstream, x):
    return np.where(x > 0, upstream, 0.0)


def softmax_forward(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(upstream, y):
    """Jacobian-vector product of softmax given its output ``y``."""
    return y * (upstream - np.sum(upstream * y, axis=-1, keepdims=True))


# -- convolution and pooling ----------------------------------------------------


def _as_channels(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, None, :]
    if x.ndim == 2:
        return x[:, None, :]
    return x


def _im2col(x, w):
    # (N, C, L) -> (N, L, C*w) windows of the zero-padded input
    left = (w - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (left, w - 1 - left)))
    windows = sliding_window_view(xp, w, axis=2)  # (N, C, L, w)
    n, c, length, _ = windows.shape
    return windows.transpose(0, 2, 1, 3).reshape(n, length, c * w)


def conv1d_forward(x, kernels, bias):
    """Zero-padded same-length cross-correlation, stride 1.

    ``x`` is (N, C, L); (N, L) and (L,) are read as a single channel.
    ``kernels`` is (K, C, w).  Returns (N, K, L).
    """
    x = _as_channels(x)
    k, c, w = kernels.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, kernels expect {c}")
    if w > x.shape[2]:
        raise ValueError(f"kernel width {w} exceeds input length {x.shape[2]}")
    cols = _im2col(x, w)
    y = cols @ kernels.reshape(k, c * w).T + bias
    return y.transpose(0, 2, 1)


def conv1d_backward(upstream, x, kernels):
    """Returns (d_x with the shape of ``x`` as passed in, d_kernels, d_bias)."""
    orig_shape = np.shape(x)
    x = _as_channels(x)
    k, c, w = kernels.shape
    n, _, length = x.shape
    cols = _im2col(x, w)
    up = upstream.transpose(0, 2, 1).reshape(n * length, k)
    d_kernels = (up.T @ cols.reshape(n * length, c * w)).reshape(k, c, w)
    d_bias = upstream.sum(axis=(0, 2))
    # input gradient: full correlation of upstream with the flipped kernels
    left = (w - 1) // 2
    flipped = kernels[:, :, ::-1].transpose(1, 0, 2)  # (C, K, w)
    up_pad = np.pad(upstream, ((0, 0), (0, 0), (w - 1 - left, left)))
    windows = sliding_window_view(up_pad, w, axis=2).transpose(0, 2, 1, 3).reshape(n, length, k * w)
    d_x = (windows @ flipped.reshape(c, k * w).T).transpose(0, 2, 1)
    return d_x.reshape(orig_shape), d_kernels, d_bias


def pool_forward(x, mode: str, size: int):
    """Non-overlapping pooling over the last axis; a trailing remainder is dropped.

    Returns (output, argmax index or None).
    """
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    x = np.asarray(x, dtype=float)
    if size < 1 or size > x.shape[-1]:
        raise ValueError(f"pool size {size} invalid for length {x.shape[-1]}")
    out_len = x.shape[-1] // size
    blocks = x[..., : out_len * size].reshape(x.shape[:-1] + (out_len, size))
    if mode == "mean":
        return blocks.mean(axis=-1), None
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def pool_backward(upstream, in_shape, mode: str, size: int, idx=None):
    out_len = upstream.shape[-1]
    d_x = np.zeros(in_shape)
    blocks = np.zeros(tuple(in_shape[:-1]) + (out_len, size))
    if mode == "mean":
        blocks += upstream[..., None] / size
    else:
        np.put_along_axis(blocks, idx[..., None], upstream[..., None], axis=-1)
    d_x[..., : out_len * size] = blocks.reshape(tuple(in_shape[:-1]) + (out_len * size,))
    return d_x


# -- variable projection layer ------------------------------------------------------


@dataclass
class VpCache:
    x: np.ndarray
    basis: object
    bundle: vp.PinvBundle
    mode: str


def vp_grid(m: int, a: float | None = None, b: float | None = None) -> SampleGrid:
    a = 0.0 if a is None else float(a)
    b = a + (m - 1) if b is None else float(b)
    return SampleGrid.uniform(m, a, b)


def vp_layer_forward(x, theta, mode: str, n: int, grid: SampleGrid):
    """Feature mode returns coefficients ``pinv x``; filter mode returns ``phi pinv x``.

    Returns (output, cache).
    """
    if mode not in ("feature", "filter"):
        raise ValueError(f"unknown VP layer mode {mode!r}")
    params = theta if isinstance(theta, VpParams) else VpParams.from_array(theta)
    basis = adaptive_hermite(grid, n, params, normalize=True)
    bundle = vp.pseudoinverse(basis.phi)
    x = np.asarray(x, dtype=float)
    y = vp.coefficients(x, bundle) if mode == "feature" else vp.project(x, bundle)
    return y, VpCache(x, basis, bundle, mode)


def vp_layer_backward(upstream, cache: VpCache | None) -> GradientBundle:
    if cache is None:
        raise ContractError("VP layer backward called before forward")
    upstream = np.asarray(upstream, dtype=float)
    bundle, x = cache.bundle, cache.x
    if cache.mode == "feature":
        d_input = upstream @ bundle.pinv
        mats = [vp.d_pinv(bundle, d) for d in cache.basis.dphi]
        d_params = np.array([np.sum(upstream * (x @ dm.T)) for dm in mats])
    else:
        d_input = (upstream @ bundle.pinv.T) @ bundle.phi.T
        mats = [vp.d_projection(bundle, d) for d in cache.basis.dphi]
        d_params = np.array([np.sum(upstream * (x @ dm)) for dm in mats])
    return GradientBundle(d_input, d_params)


# -- layer objects -------------------------------------------------------------------


class Layer:
    """One layer: spec, flat parameter vector and forward cache."""

    def __init__(self, spec: LayerSpec, params=None):
        self.spec = spec
        if params is None:
            params = np.zeros(spec.n_params)
        params = np.asarray(params, dtype=float).copy()
        if params.shape != (spec.n_params,):
            raise ValueError(f"{spec.kind} expects {spec.n_params} parameters, got {params.size}")
        self._params = params
        self._cache = None

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, value):
        value = np.asarray(value, dtype=float)
        if value.shape != self._params.shape:
            raise ValueError("parameter vector has the wrong length")
        self._params = value.copy()
        self._cache = None

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def forward(self, x):
        raise NotImplementedError

    def backward(self, upstream) -> GradientBundle:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise ContractError(f"{self.spec.kind} backward called before forward")
        return self._cache


class VPLayer(Layer):
    def __init__(self, spec, params=None):
        if params is None:
            params = init_params(spec, None)
        super().__init__(spec, params)
        d = spec.dims
        self.grid = vp_grid(d["m"], d.get("a"), d.get("b"))
        self.mode = "feature" if spec.kind == "vp_feature" else "filter"
        self._rank = None

    @property
    def theta(self) -> VpParams:
        return VpParams.from_array(self._params)

    @property
    def lam_bounds(self) -> tuple[float, float]:
        a, b = self.grid.interval
        return 6.0 / (b - a), self.grid.m / 2.0

    def clamp(self):
        lo, hi = self.lam_bounds
        lam = min(max(self._params[1], lo), hi)
        if lam != self._params[1]:
            p = self._params.copy()
            p[1] = lam
            self.params = p

    def basis(self):
        """Current sampled basis (column-normalized, as used in the forward pass)."""
        return adaptive_hermite(self.grid, self.spec.dims["n"], self.theta, normalize=True)

    def forward(self, x):
        y, cache = vp_layer_forward(x, self._params, self.mode, self.spec.dims["n"], self.grid)
        rank = cache.bundle.rank
        if self._rank is not None and rank != self._rank:
            warnings.warn(f"VP basis rank changed from {self._rank} to {rank}", RuntimeWarning)
        self._rank = rank
        self._cache = cache
        return y

    def backward(self, upstream):
        return vp_layer_backward(upstream, self._cache)

    def penalty(self, x):
        """Per-sample ``r2 / ||x||^2`` and its parameter gradient, zero-energy rows masked.

        Returns (values, grads (N x 2), valid mask).
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cache = self._cache
        if cache is None or cache.x is not x and not np.array_equal(cache.x, x):
            self.forward(x)
            cache = self._cache
        energy = np.sum(x * x, axis=1)
        valid = energy > 0
        safe = np.where(valid, energy, 1.0)
        # same as vp.residual_r2 / vp.d_r2, sharing the coefficients and residual
        bundle = cache.bundle
        c = x @ bundle.pinv.T
        resid = x - c @ bundle.phi.T
        values = np.where(valid, np.sum(resid * resid, axis=1) / safe, 0.0)
        grads = np.stack(
            [np.where(valid, -2.0 * np.sum(resid * (c @ d.T), axis=1) / safe, 0.0) for d in cache.basis.dphi], axis=1
        )
        return values, grads, valid


class FCLayer(Layer):
    def _split(self):
        d = self.spec.dims
        nw = d["outputs"] * d["inputs"]
        return self._params[:nw].reshape(d["outputs"], d["inputs"]), self._params[nw:]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(x.shape[0], -1) if x.ndim > 1 else x
        w, b = self._split()
        self._cache = (flat, x.shape)
        return fc_forward(flat, w, b)

    def backward(self, upstream):
        flat, shape = self._need_cache()
        w, _ = self._split()
        d_x, d_w, d_b = fc_backward(upstream, flat, w)
        return GradientBundle(d_x.reshape(shape), np.concatenate([d_w.ravel(), d_b]))


class ReluLayer(Layer):
    def forward(self, x):
        self._cache = np.asarray(x, dtype=float)
        return relu_forward(self._cache)

    def backward(self, upstream):
        return GradientBundle(relu_backward(upstream, self._need_cache()), np.zeros(0))


class SoftmaxLayer(Layer):
    def forward(self, x):
        y = softmax_forward(x)
        self._cache = y
        return y

    def backward(self, upstream):
        return GradientBundle(softmax_backward(upstream, self._need_cache()), np.zeros(0))


class ConvLayer(Layer):
    def _split(self):
        d = self.spec.dims
        nk = d["out_channels"] * d["in_channels"] * d["width"]
        kernels = self._params[:nk].reshape(d["out_channels"], d["in_channels"], d["width"])
        return kernels, self._params[nk:]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        kernels, bias = self._split()
        y = conv1d_forward(x, kernels, bias)
        self._cache = x
        return y if x.ndim > 1 else y[0]

    def backward(self, upstream):
        x = self._need_cache()
        kernels, _ = self._split()
        up = upstream if upstream.ndim == 3 else upstream[None]
        d_x, d_k, d_b = conv1d_backward(up, x, kernels)
        return GradientBundle(d_x, np.concatenate([d_k.ravel(), d_b]))


class PoolLayer(Layer):
    def forward(self, x):
        x = np.asarray(x, dtype=float)
        mode = "mean" if self.spec.kind == "pool_mean" else "max"
        y, idx = pool_forward(x, mode, self.spec.dims["size"])
        self._cache = (x.shape, idx, mode)
        return y

    def backward(self, upstream):
        shape, idx, mode = self._need_cache()
        return GradientBundle(pool_backward(upstream, shape, mode, self.spec.dims["size"], idx), np.zeros(0))


_LAYER_CLASSES = {
    "vp_feature": VPLayer,
    "vp_filter": VPLayer,
    "fully_connected": FCLayer,
    "relu": ReluLayer,
    "softmax": SoftmaxLayer,
    "conv1d": ConvLayer,
    "pool_mean": PoolLayer,
    "pool_max": PoolLayer,
}


def make_layer(spec: LayerSpec, params=None) -> Layer:
    return _LAYER_CLASSES[spec.kind](spec, params)


# -- networks ----------------------------------------------------------------------------


def check_specs(specs) -> None:
    if not specs:
        raise ValueError("a network needs at least one layer")
    for i, (prev, nxt) in enumerate(zip(specs, specs[1:])):
        if math.prod(prev.out_shape) != math.prod(nxt.in_shape):
            raise ValueError(
                f"layer {i} ({prev.kind}) outputs {prev.out_shape} but layer {i + 1} ({nxt.kind}) expects {nxt.in_shape}"
            )
    for s in specs:
        if s.kind.startswith("vp_") and s.dims["n"] < 1:
            raise ValueError("VP layers need at least one basis function")


def init_params(spec: LayerSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases; VP layers take ``init['tau']``, ``init['lam']``."""
    d = spec.dims
    if spec.kind.startswith("vp_"):
        if "tau" in spec.init and "lam" in spec.init:
            return np.array([spec.init["tau"], spec.init["lam"]], dtype=float)
        grid = vp_grid(d["m"], d.get("a"), d.get("b"))
        a, b = grid.interval
        return np.array([(a + b) / 2.0, 12.0 / (b - a)])
    if spec.kind == "fully_connected":
        limit = np.sqrt(6.0 / (d["inputs"] + d["outputs"]))
        w = rng.uniform(-limit, limit, size=d["outputs"] * d["inputs"])
        return np.concatenate([w, np.zeros(d["outputs"])])
    if spec.kind == "conv1d":
        fan_in = d["in_channels"] * d["width"]
        fan_out = d["out_channels"] * d["width"]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=d["out_channels"] * fan_in)
        return np.concatenate([w, np.zeros(d["out_channels"])])
    return np.zeros(0)


class Network:
    def __init__(self, specs, params=None, rng=None):
        specs = list(specs)
        check_specs(specs)
        self.specs = specs
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = [init_params(s, rng) for s in specs]
        self.layers = [make_layer(s, p) for s, p in zip(specs, params)]

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    @property
    def vp_layer(self) -> VPLayer | None:
        for layer in self.layers:
            if isinstance(layer, VPLayer) and layer.mode == "feature":
                return layer
        return None

    def get_params(self) -> np.ndarray:
        return np.concatenate([layer.params for layer in self.layers])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for layer in self.layers:
            layer.params = flat[pos : pos + layer.n_params]
            pos += layer.n_params

    def clamp(self) -> None:
        for layer in self.layers:
            if isinstance(layer, VPLayer):
                layer.clamp()

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        self._single = single
        if single:
            x = x[None]
        for layer in self.layers:
            x = layer.forward(x)
        return x[0] if single else x

    def backward(self, d_output, from_logits: bool = False) -> list[GradientBundle]:
        """Reverse-mode pass; returns one bundle per layer in forward order.

        With ``from_logits`` the final softmax is skipped and ``d_output`` is the
        gradient with respect to its input.
        """
        layers = self.layers
        grads: list[GradientBundle | None] = [None] * len(layers)
        stop = len(layers)
        upstream = np.asarray(d_output, dtype=float)
        single = getattr(self, "_single", False)
        if single:
            upstream = upstream[None]
        if from_logits:
            if not isinstance(layers[-1], SoftmaxLayer):
                raise ValueError("from_logits requires a final softmax layer")
            grads[-1] = GradientBundle(upstream, np.zeros(0))
            stop -= 1
        for i in range(stop - 1, -1, -1):
            g = layers[i].backward(upstream)
            grads[i] = g
            upstream = g.d_input
        if single:
            for g in grads:
                g.d_input = g.d_input[0]
        return grads

    def flat_grad(self, grads: list[GradientBundle]) -> np.ndarray:
        return np.concatenate([g.d_params for g in grads])


def network_forward(net: Network, x):
    return net.forward(x)


def network_backward(net: Network, d_output, from_logits: bool = False):
    return net.backward(d_output, from_logits)


# -- architecture builders ------------------------------------------------------------------


def vpnet_specs(m, n, hidden, classes, tau=None, lam=None, interval=None) -> list[LayerSpec]:
    """VP feature layer -> FC + ReLU -> FC + SoftMax."""
    a, b = interval if interval is not None else (0.0, float(m - 1))
    init = {} if tau is None else {"tau": float(tau), "lam": float(lam)}
    return [
        LayerSpec("vp_feature", {"m": m, "n": n, "a": a, "b": b}, init),
        LayerSpec("fully_connected", {"inputs": n, "outputs": hidden}),
        LayerSpec("relu", {"size": hidden}),
        LayerSpec("fully_connected", {"inputs": hidden, "outputs": classes}),
        LayerSpec("softmax", {"size": classes}),
    ]


def fcnn_specs(m, hidden, classes, first=None) -> list[LayerSpec]:
    """One or two FC + ReLU layers, then FC + SoftMax."""
    layers = []
    width = m
    for size in ([first] if first else []) + [hidden]:
        layers += [
            LayerSpec("fully_connected", {"inputs": width, "outputs": size}),
            LayerSpec("relu", {"size": size}),
        ]
        width = size
    layers += [
        LayerSpec("fully_connected", {"inputs": width, "outputs": classes}),
        LayerSpec("softmax", {"size": classes}),
    ]
    return layers


def cnn_specs(m, channels, kernel, pool, hidden, classes, pool_mode="max") -> list[LayerSpec]:
    """Conv1d -> pooling -> FC + ReLU -> FC + SoftMax."""
    pooled = channels * (m // pool)
    return [
        LayerSpec("conv1d", {"length": m, "in_channels": 1, "out_channels": channels, "width": kernel}),
        LayerSpec(f"pool_{pool_mode}", {"channels": channels, "length": m, "size": pool}),
        LayerSpec("fully_connected", {"inputs": pooled, "outputs": hidden}),
        LayerSpec("relu", {"size": hidden}),
        LayerSpec("fully_connected", {"inputs": hidden, "outputs": classes}),
        LayerSpec("softmax", {"size": classes}),
    ]


def count_parameters(specs) -> int:
    return sum(s.n_params for s in specs)
