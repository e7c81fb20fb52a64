"""Multi-branch temporal network: one conv branch per timestamp, depth-wise
concatenation, shared trunk, dense head.

Branches are dropped two ways:

* train time (missing-data mode): whole branches are dropped with keep
  probability 1/t, survivors scaled by t (inverted dropout), and dropped
  branches receive no gradient;
* inference: branches whose timestamps are unavailable contribute zeroed
  post-branch activations and the k survivors are scaled by t/k.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, InputError
from .ops import (
    Array,
    ConvLayerParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    maxpool_backward,
    maxpool_forward,
    out_extent,
    relu_backward,
    relu_forward,
)


@dataclass
class NetworkSpec:
    """Architecture description. Defaults follow the production topology:
    25x25 windows, 64-filter 4x4 branch convs with 2x2/2 pooling, a
    128-filter 4x4 + 256-filter 3x3 trunk, and a 1024-1024 dense head."""

    t: int
    channels_per_branch: int
    num_classes: int
    window_size: int = 25
    branch_filters: int = 64
    branch_kernel: int = 4
    branch_pool_kernel: int = 2
    branch_pool_stride: int = 2
    trunk1_filters: int = 128
    trunk1_kernel: int = 4
    trunk1_pool_kernel: int = 2
    trunk1_pool_stride: int = 2
    trunk2_filters: int = 256
    trunk2_kernel: int = 3
    trunk2_pool_kernel: int = 2
    trunk2_pool_stride: int = 1
    fc_sizes: tuple = (1024, 1024)
    fc_keep_prob: float = 0.5
    missing_data_mode: bool = False
    share_branch_params: bool = False
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9

    @property
    def branch_dropout_keep_prob(self) -> float:
        return 1.0 / self.t if self.missing_data_mode else 1.0

    def validate(self) -> None:
        if self.t < 1:
            raise ConfigurationError(f"t must be >= 1, got {self.t}")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.channels_per_branch < 1:
            raise ConfigurationError("channels_per_branch must be >= 1")
        if not 0.0 < self.fc_keep_prob <= 1.0:
            raise ConfigurationError("fc_keep_prob must be in (0, 1]")
        self.shape_chain()

    def shape_chain(self):
        """Per-stage spatial extents; raises if any extent collapses below 1."""
        s = self.window_size
        chain = [("window", (self.channels_per_branch, s, s))]
        s = out_extent(s, self.branch_kernel, 1)
        chain.append(("branch_conv", (self.branch_filters, s, s)))
        s = out_extent(s, self.branch_pool_kernel, self.branch_pool_stride)
        chain.append(("branch_pool", (self.branch_filters, s, s)))
        chain.append(("concat", (self.branch_filters * self.t, s, s)))
        s = out_extent(s, self.trunk1_kernel, 1)
        chain.append(("trunk1_conv", (self.trunk1_filters, s, s)))
        s = out_extent(s, self.trunk1_pool_kernel, self.trunk1_pool_stride)
        chain.append(("trunk1_pool", (self.trunk1_filters, s, s)))
        s = out_extent(s, self.trunk2_kernel, 1)
        chain.append(("trunk2_conv", (self.trunk2_filters, s, s)))
        s = out_extent(s, self.trunk2_pool_kernel, self.trunk2_pool_stride)
        chain.append(("trunk2_pool", (self.trunk2_filters, s, s)))
        chain.append(("flatten", (self.trunk2_filters * s * s,)))
        return chain

    def feature_size(self) -> int:
        return self.shape_chain()[-1][1][0]

    def concat_height(self) -> int:
        return self.shape_chain()[2][1][1]


@dataclass
class NetworkParams:
    """All learnable tensors plus batch-norm state, keyed by stable names."""

    spec: NetworkSpec
    branches: list  # t ConvLayerParams (one shared instance when sharing)
    trunk1: ConvLayerParams
    trunk2: ConvLayerParams
    fc_weights: list
    fc_biases: list
    head_weight: Array
    head_bias: Array

    def branch(self, b: int) -> ConvLayerParams:
        return self.branches[0] if self.spec.share_branch_params else self.branches[b]

    def _branch_items(self):
        if self.spec.share_branch_params:
            yield "branch", self.branches[0]
        else:
            for b in range(self.spec.t):
                yield f"branch{b:02d}", self.branches[b]

    def named_tensors(self):
        """(name, array) pairs in deterministic order, running stats included."""
        for prefix, cp in self._branch_items():
            yield from _conv_items(prefix, cp)
        yield from _conv_items("trunk1", self.trunk1)
        yield from _conv_items("trunk2", self.trunk2)
        for i, (w, b) in enumerate(zip(self.fc_weights, self.fc_biases)):
            yield f"fc{i}/weight", w
            yield f"fc{i}/bias", b
        yield "head/weight", self.head_weight
        yield "head/bias", self.head_bias

    def trainable(self) -> dict:
        """Name -> tensor for everything the optimizer updates."""
        return {
            name: arr
            for name, arr in self.named_tensors()
            if not name.endswith(("running_mean", "running_var"))
        }

    def decayed_names(self) -> set:
        """Conv and dense weights: the only tensors weight decay touches."""
        return {
            name
            for name, _ in self.named_tensors()
            if name.endswith("/weight") and "bn" not in name
        }

    def branch_prefix(self, b: int) -> str:
        return "branch" if self.spec.share_branch_params else f"branch{b:02d}"

    def branch_param_names(self, b: int) -> list:
        prefix = self.branch_prefix(b)
        return [
            f"{prefix}/conv/weight",
            f"{prefix}/conv/bias",
            f"{prefix}/bn/gamma",
            f"{prefix}/bn/beta",
        ]

    def count_parameters(self) -> int:
        return sum(arr.size for _, arr in self.named_tensors())


def _conv_items(prefix: str, cp: ConvLayerParams):
    yield f"{prefix}/conv/weight", cp.weight
    yield f"{prefix}/conv/bias", cp.bias
    yield f"{prefix}/bn/gamma", cp.bn_gamma
    yield f"{prefix}/bn/beta", cp.bn_beta
    yield f"{prefix}/bn/running_mean", cp.bn_running_mean
    yield f"{prefix}/bn/running_var", cp.bn_running_var


def _init_conv(rng, k: int, c: int, kh: int, kw: int, spec: NetworkSpec, dtype) -> ConvLayerParams:
    fan_in = c * kh * kw
    weight = (rng.standard_normal((k, c, kh, kw)) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return ConvLayerParams(
        weight=weight,
        bias=np.zeros(k, dtype=dtype),
        bn_gamma=np.ones(k, dtype=dtype),
        bn_beta=np.zeros(k, dtype=dtype),
        bn_running_mean=np.zeros(k, dtype=dtype),
        bn_running_var=np.ones(k, dtype=dtype),
        bn_epsilon=spec.bn_epsilon,
        bn_momentum=spec.bn_momentum,
    )


def _init_dense(rng, n_in: int, n_out: int, dtype):
    w = (rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / n_in)).astype(dtype)
    return w, np.zeros(n_out, dtype=dtype)


def build(spec: NetworkSpec, rng, dtype=np.float32) -> NetworkParams:
    """Allocate and He-initialize all tensors of the architecture."""
    spec.validate()
    kb = spec.branch_kernel
    n_branch_params = 1 if spec.share_branch_params else spec.t
    branches = [
        _init_conv(rng, spec.branch_filters, spec.channels_per_branch, kb, kb, spec, dtype)
        for _ in range(n_branch_params)
    ]
    trunk1 = _init_conv(
        rng, spec.trunk1_filters, spec.branch_filters * spec.t,
        spec.trunk1_kernel, spec.trunk1_kernel, spec, dtype,
    )
    trunk2 = _init_conv(
        rng, spec.trunk2_filters, spec.trunk1_filters,
        spec.trunk2_kernel, spec.trunk2_kernel, spec, dtype,
    )
    fc_weights, fc_biases = [], []
    n_in = spec.feature_size()
    for size in spec.fc_sizes:
        w, b = _init_dense(rng, n_in, size, dtype)
        fc_weights.append(w)
        fc_biases.append(b)
        n_in = size
    head_weight, head_bias = _init_dense(rng, n_in, spec.num_classes, dtype)
    return NetworkParams(
        spec=spec,
        branches=branches,
        trunk1=trunk1,
        trunk2=trunk2,
        fc_weights=fc_weights,
        fc_biases=fc_biases,
        head_weight=head_weight,
        head_bias=head_bias,
    )


def make_2dcnn_spec(t: int, ch: int, num_classes: int, **overrides) -> NetworkSpec:
    """Single-branch variant consuming a temporal depth-wise concatenation:
    one window of t*ch channels, identical trunk and head topology."""
    return NetworkSpec(t=1, channels_per_branch=t * ch, num_classes=num_classes, **overrides)


def build_2dcnn(t: int, ch: int, num_classes: int, rng, dtype=np.float32, **overrides) -> NetworkParams:
    return build(make_2dcnn_spec(t, ch, num_classes, **overrides), rng, dtype)


def stack_windows_depthwise(windows, mask=None) -> Array:
    """Stack per-timestamp windows along channels for the 2-D CNN variant.
    Missing timestamps contribute zero channels."""
    t = len(windows)
    mask = _as_mask(mask, t)
    ref = next(windows[b] for b in range(t) if mask[b])
    parts = [
        windows[b] if mask[b] else np.zeros_like(ref)
        for b in range(t)
    ]
    return np.concatenate(parts, axis=1)


def branch_dropout_mask(t: int, keep_prob: float, rng, available=None) -> np.ndarray:
    """Bernoulli keep mask over branches, resampled until at least one
    available branch survives. Unavailable branches are never kept."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigurationError(f"keep_prob must be in (0, 1], got {keep_prob}")
    available = _as_mask(available, t)
    if not available.any():
        raise InputError("no available branches to sample from")
    if keep_prob == 1.0:
        return available.copy()
    while True:
        keep = (rng.random(t) < keep_prob) & available
        if keep.any():
            return keep


def _as_mask(mask, t: int) -> np.ndarray:
    if mask is None:
        return np.ones(t, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (t,):
        raise InputError(f"mask has shape {mask.shape}, expected ({t},)")
    return mask


def _branch_forward(cp: ConvLayerParams, x: Array, spec: NetworkSpec, mode: str):
    out, c_conv = conv2d_forward(x, cp, (1, 1))
    out, c_bn = batchnorm_forward(out, cp, mode)
    out, c_relu = relu_forward(out)
    out, c_pool = maxpool_forward(
        out,
        (spec.branch_pool_kernel, spec.branch_pool_kernel),
        (spec.branch_pool_stride, spec.branch_pool_stride),
    )
    return out, (c_conv, c_bn, c_relu, c_pool)


def _branch_backward(cache, dout: Array):
    c_conv, c_bn, c_relu, c_pool = cache
    d = maxpool_backward(c_pool, dout)
    d = relu_backward(c_relu, d)
    d, dgamma, dbeta = batchnorm_backward(c_bn, d)
    dx, dweight, dbias = conv2d_backward(c_conv, d)
    return dx, {"conv/weight": dweight, "conv/bias": dbias, "bn/gamma": dgamma, "bn/beta": dbeta}


def forward(params: NetworkParams, windows, mask=None, mode: str = "eval", rng=None):
    """Run the network. Returns (logits, cache).

    windows: sequence of t arrays (N, ch, win, win); entries for unavailable
    timestamps may be None. mask: per-timestamp availability. In train mode
    with missing-data mode enabled, branch dropout is sampled from rng.
    """
    spec = params.spec
    t = spec.t
    if len(windows) != t:
        raise InputError(f"expected {t} window stacks, got {len(windows)}")
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    mask = _as_mask(mask, t)
    if not mask.any():
        raise InputError("all timestamps are masked out")

    if mode == "train" and spec.missing_data_mode:
        if rng is None:
            raise ConfigurationError("train mode with branch dropout needs an rng")
        keep = branch_dropout_mask(t, spec.branch_dropout_keep_prob, rng, available=mask)
        scale = 1.0 / spec.branch_dropout_keep_prob
    else:
        keep = mask
        scale = t / int(mask.sum())

    keep_idx = [b for b in range(t) if keep[b]]
    n = None
    for b in keep_idx:
        if windows[b] is None:
            raise InputError(f"timestamp {b} is kept but its windows are missing")
        if n is None:
            n = windows[b].shape[0]
        elif windows[b].shape[0] != n:
            raise InputError("batch size differs across timestamps")

    dtype = params.trunk1.weight.dtype
    f = spec.branch_filters
    branch_caches = {}
    acts = {}
    for b in keep_idx:
        act, bc = _branch_forward(params.branch(b), windows[b].astype(dtype, copy=False), spec, mode)
        if scale != 1.0:
            act = act * scale
        acts[b] = act
        branch_caches[b] = bc

    hc = acts[keep_idx[0]].shape[2]
    subset = mode == "train" and len(keep_idx) < t
    if subset:
        cat = np.concatenate([acts[b] for b in keep_idx], axis=1)
        ch_idx = np.concatenate([np.arange(b * f, (b + 1) * f) for b in keep_idx])
        trunk1_conv = replace(params.trunk1, weight=np.ascontiguousarray(params.trunk1.weight[:, ch_idx]))
    else:
        cat = np.zeros((n, f * t, hc, hc), dtype=dtype)
        for b in keep_idx:
            cat[:, b * f : (b + 1) * f] = acts[b]
        ch_idx = None
        trunk1_conv = params.trunk1

    out, c_t1conv = conv2d_forward(cat, trunk1_conv, (1, 1))
    out, c_t1bn = batchnorm_forward(out, params.trunk1, mode)
    out, c_t1relu = relu_forward(out)
    out, c_t1pool = maxpool_forward(
        out, (spec.trunk1_pool_kernel,) * 2, (spec.trunk1_pool_stride,) * 2
    )
    out, c_t2conv = conv2d_forward(out, params.trunk2, (1, 1))
    out, c_t2bn = batchnorm_forward(out, params.trunk2, mode)
    out, c_t2relu = relu_forward(out)
    out, c_t2pool = maxpool_forward(
        out, (spec.trunk2_pool_kernel,) * 2, (spec.trunk2_pool_stride,) * 2
    )
    conv_out_shape = out.shape
    flat = out.reshape(n, -1)

    fc_caches = []
    for w, b in zip(params.fc_weights, params.fc_biases):
        flat, c_dense = dense_forward(flat, w, b)
        flat, c_relu = relu_forward(flat)
        flat, c_drop = dropout_forward(flat, spec.fc_keep_prob, rng, mode)
        fc_caches.append((c_dense, c_relu, c_drop))
    logits, c_head = dense_forward(flat, params.head_weight, params.head_bias)

    cache = {
        "keep_idx": keep_idx,
        "scale": scale,
        "subset": subset,
        "ch_idx": ch_idx,
        "branch": branch_caches,
        "trunk1": (c_t1conv, c_t1bn, c_t1relu, c_t1pool),
        "trunk2": (c_t2conv, c_t2bn, c_t2relu, c_t2pool),
        "conv_out_shape": conv_out_shape,
        "fc": fc_caches,
        "head": c_head,
    }
    return logits, cache


def backward(params: NetworkParams, cache, dlogits: Array) -> dict:
    """Gradients for every parameter the iteration touched.

    Dropped branches have no entry: they receive no update at all. The
    trunk1 weight gradient is always full-shaped (zero-filled over dropped
    input-channel blocks on the subset path)."""
    spec = params.spec
    f = spec.branch_filters
    grads = {}

    d, dw, db = dense_backward(cache["head"], dlogits)
    grads["head/weight"] = dw
    grads["head/bias"] = db
    for i in range(len(params.fc_weights) - 1, -1, -1):
        c_dense, c_relu, c_drop = cache["fc"][i]
        d = dropout_backward(c_drop, d)
        d = relu_backward(c_relu, d)
        d, dw, db = dense_backward(c_dense, d)
        grads[f"fc{i}/weight"] = dw
        grads[f"fc{i}/bias"] = db

    d = d.reshape(cache["conv_out_shape"])
    c_conv, c_bn, c_relu, c_pool = cache["trunk2"]
    d = maxpool_backward(c_pool, d)
    d = relu_backward(c_relu, d)
    d, dgamma, dbeta = batchnorm_backward(c_bn, d)
    d, dw, db = conv2d_backward(c_conv, d)
    grads["trunk2/conv/weight"] = dw
    grads["trunk2/conv/bias"] = db
    grads["trunk2/bn/gamma"] = dgamma
    grads["trunk2/bn/beta"] = dbeta

    c_conv, c_bn, c_relu, c_pool = cache["trunk1"]
    d = maxpool_backward(c_pool, d)
    d = relu_backward(c_relu, d)
    d, dgamma, dbeta = batchnorm_backward(c_bn, d)
    dcat, dw, db = conv2d_backward(c_conv, d)
    if cache["subset"]:
        dw_full = np.zeros_like(params.trunk1.weight)
        dw_full[:, cache["ch_idx"]] = dw
        dw = dw_full
    grads["trunk1/conv/weight"] = dw
    grads["trunk1/conv/bias"] = db
    grads["trunk1/bn/gamma"] = dgamma
    grads["trunk1/bn/beta"] = dbeta

    keep_idx = cache["keep_idx"]
    scale = cache["scale"]
    for pos, b in enumerate(keep_idx):
        if cache["subset"]:
            dact = dcat[:, pos * f : (pos + 1) * f]
        else:
            dact = dcat[:, b * f : (b + 1) * f]
        if scale != 1.0:
            dact = dact * scale
        _, branch_grads = _branch_backward(cache["branch"][b], dact)
        for suffix, g in branch_grads.items():
            name = f"{params.branch_param_names(b)[0].rsplit('/', 2)[0]}/{suffix}"
            if name in grads:
                grads[name] = grads[name] + g
            else:
                grads[name] = g
    return grads


def inference_branch_drop(params: NetworkParams, windows, mask) -> Array:
    """Eval forward with unavailable branches dropped: their post-branch
    activations are zeroed and the k survivors are scaled by t/k."""
    mask = _as_mask(mask, params.spec.t)
    if not mask.any():
        raise InputError("inference needs at least one available timestamp")
    logits, _ = forward(params, windows, mask=mask, mode="eval")
    return logits
