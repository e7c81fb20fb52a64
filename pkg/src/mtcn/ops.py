"""Layer kernels: forward passes and hand-derived backward passes.

All kernels are pure functions over numpy arrays in NCHW layout (batch,
channels, height, width; row-major, W fastest). Each forward returns
``(output, cache)`` and the matching backward consumes that cache plus the
upstream gradient. Convolutions and pools use valid padding only, so output
extents follow ``floor((in - kernel) / stride) + 1`` exactly.

Training runs in float32; passing float64 arrays switches every kernel to
64-bit, which is what the finite-difference gradient checks rely on.

The one deliberate impurity: ``batchnorm_forward`` in train mode updates the
running statistics stored on its ``ConvLayerParams``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigurationError, NumericError, StateError

Array = np.ndarray


def out_extent(size: int, kernel: int, stride: int) -> int:
    """Spatial extent produced by a valid-padding kernel sweep."""
    if size < kernel:
        raise ConfigurationError(
            f"kernel {kernel} larger than input extent {size} (valid padding)"
        )
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    return (size - kernel) // stride + 1


def check_finite(x: Array, what: str) -> None:
    """Raise NumericError if ``x`` contains NaN or Inf."""
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


@dataclass
class ConvLayerParams:
    """Convolution weights plus the batch-norm state that follows them."""

    weight: Array  # (K, C_in, kh, kw)
    bias: Array  # (K,)
    bn_gamma: Array  # (K,)
    bn_beta: Array  # (K,)
    bn_running_mean: Array  # (K,)
    bn_running_var: Array  # (K,)
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9
    bn_initialized: bool = False

    def __post_init__(self) -> None:
        k = self.weight.shape[0]
        for name in ("bias", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            arr = getattr(self, name)
            if arr.shape != (k,):
                raise ConfigurationError(
                    f"{name} has shape {arr.shape}, expected ({k},) to match weight"
                )
        if np.any(self.bn_running_var < 0):
            raise ConfigurationError("bn_running_var must be nonnegative")
        if self.bn_epsilon <= 0:
            raise ConfigurationError("bn_epsilon must be positive")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------
#
# The convolution runs as im2col + one GEMM. Internally the input is
# transposed to channels-last once so the window gather copies contiguous
# channel runs; the public contract stays NCHW.


def _im2col(x_nhwc: Array, kh: int, kw: int, sh: int, sw: int) -> Array:
    n, h, w, c = x_nhwc.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    sn, shh, sww, sc = x_nhwc.strides
    view = as_strided(
        x_nhwc,
        (n, ho, wo, kh, kw, c),
        (sn, shh * sh, sww * sw, shh, sww, sc),
    )
    return view.reshape(n * ho * wo, kh * kw * c)


def _col2im(dcols: Array, shape_nhwc, kh: int, kw: int, sh: int, sw: int) -> Array:
    n, h, w, c = shape_nhwc
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    dx = np.zeros(shape_nhwc, dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, kh, kw, c)
    for dy in range(kh):
        for dxo in range(kw):
            dx[:, dy : dy + ho * sh : sh, dxo : dxo + wo * sw : sw, :] += d6[:, :, :, dy, dxo, :]
    return dx


def conv2d_forward(x: Array, params: ConvLayerParams, stride=(1, 1)):
    """Valid-padding 2-D convolution. x: (N, C, H, W) -> (N, K, H', W')."""
    n, c, h, w = x.shape
    k, cw, kh, kw = params.weight.shape
    if c != cw:
        raise ConfigurationError(f"input has {c} channels but weights expect {cw}")
    sh, sw = stride
    ho = out_extent(h, kh, sh)
    wo = out_extent(w, kw, sw)
    x_nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    cols = _im2col(x_nhwc, kh, kw, sh, sw)
    # weight rearranged to (kh*kw*C, K) to match the column layout
    wmat = np.ascontiguousarray(params.weight.transpose(2, 3, 1, 0)).reshape(kh * kw * c, k)
    out = cols @ wmat
    out += params.bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))
    cache = (x.shape, cols, params.weight, (sh, sw))
    return out, cache


def conv2d_backward(cache, dout: Array):
    """Gradients of conv2d_forward. Returns (dx, dweight, dbias)."""
    (n, c, h, w), cols, weight, (sh, sw) = cache
    k, _, kh, kw = weight.shape
    _, _, ho, wo = dout.shape
    dout_r = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
    dbias = dout_r.sum(axis=0)
    dwmat = cols.T @ dout_r  # (kh*kw*C, K)
    dweight = np.ascontiguousarray(
        dwmat.reshape(kh, kw, c, k).transpose(3, 2, 0, 1)
    )
    wmat = np.ascontiguousarray(weight.transpose(2, 3, 1, 0)).reshape(kh * kw * c, k)
    dcols = dout_r @ wmat.T
    dx_nhwc = _col2im(dcols, (n, h, w, c), kh, kw, sh, sw)
    dx = np.ascontiguousarray(dx_nhwc.transpose(0, 3, 1, 2))
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------
#
# Ties are broken by the first occurrence in row-major window scan order,
# which is exactly what argmax over the flattened (kh, kw) axis returns.


def maxpool_forward(x: Array, kernel=(2, 2), stride=(2, 2)):
    """Max pooling with argmax bookkeeping. Returns ((N,C,H',W'), cache)."""
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    ho = out_extent(h, kh, sh)
    wo = out_extent(w, kw, sw)
    if (kh, kw) == (sh, sw):
        # non-overlapping: windows partition (a crop of) the input
        xc = x[:, :, : ho * kh, : wo * kw]
        win = (
            xc.reshape(n, c, ho, kh, wo, kw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, kh * kw)
        )
    else:
        sn, sc, shh, sww = x.strides
        view = as_strided(
            x,
            (n, c, ho, wo, kh, kw),
            (sn, sc, shh * sh, sww * sw, shh, sww),
        )
        win = view.reshape(n, c, ho, wo, kh * kw)
    argmax = win.argmax(axis=4)
    out = np.take_along_axis(win, argmax[..., None], axis=4)[..., 0]
    cache = (x.shape, (kh, kw), (sh, sw), argmax)
    return out, cache


def maxpool_backward(cache, dout: Array) -> Array:
    """Routes each output gradient to its stored argmax position."""
    (n, c, h, w), (kh, kw), (sh, sw), argmax = cache
    ho, wo = dout.shape[2], dout.shape[3]
    dx = np.zeros((n, c, h, w), dtype=dout.dtype)
    if (kh, kw) == (sh, sw):
        dwin = np.zeros((n, c, ho, wo, kh * kw), dtype=dout.dtype)
        np.put_along_axis(dwin, argmax[..., None], dout[..., None], axis=4)
        dx[:, :, : ho * kh, : wo * kw] = (
            dwin.reshape(n, c, ho, wo, kh, kw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * kh, wo * kw)
        )
    else:
        # overlapping windows can hit the same input cell: accumulate
        dy, dxo = np.unravel_index(argmax, (kh, kw))
        ii, cc, oy, ox = np.indices((n, c, ho, wo), sparse=False)
        rows = oy * sh + dy
        cols = ox * sw + dxo
        np.add.at(dx, (ii, cc, rows, cols), dout)
    return dx


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batchnorm_forward(x: Array, params: ConvLayerParams, mode: str):
    """Per-channel batch norm over (N, H, W). mode is 'train' or 'eval'.

    Train mode normalizes by batch mean and population variance and updates
    the running statistics in ``params`` (momentum 0.9 by default). Eval mode
    uses the stored running statistics.
    """
    n, c, h, w = x.shape
    eps = params.bn_epsilon
    gamma = params.bn_gamma.reshape(1, c, 1, 1)
    beta = params.bn_beta.reshape(1, c, 1, 1)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ConfigurationError(
                f"batch norm needs >= 2 samples per channel, got {m}"
            )
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
        mom = params.bn_momentum
        params.bn_running_mean[:] = mom * params.bn_running_mean + (1.0 - mom) * mu
        params.bn_running_var[:] = mom * params.bn_running_var + (1.0 - mom) * var
        params.bn_initialized = True
        out = gamma * xhat + beta
        cache = (xhat, invstd, params.bn_gamma, m)
        return out, cache
    if mode == "eval":
        if not params.bn_initialized:
            raise StateError("batch norm running statistics were never initialized")
        invstd = 1.0 / np.sqrt(params.bn_running_var + eps)
        xhat = (x - params.bn_running_mean.reshape(1, c, 1, 1)) * invstd.reshape(1, c, 1, 1)
        out = gamma * xhat + beta
        cache = (xhat, invstd, params.bn_gamma, None)
        return out, cache
    raise ConfigurationError(f"unknown batch norm mode {mode!r}")


def batchnorm_backward(cache, dout: Array):
    """Full batch-statistics chain rule. Returns (dx, dgamma, dbeta)."""
    xhat, invstd, gamma, m = cache
    c = xhat.shape[1]
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dxhat = dout * gamma.reshape(1, c, 1, 1)
    if m is None:
        # eval-mode statistics are constants
        dx = dxhat * invstd.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta
    sum_dxhat = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
    dx = (invstd.reshape(1, c, 1, 1) / m) * (
        m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise and dense layers
# ---------------------------------------------------------------------------


def relu_forward(x: Array):
    out = np.maximum(x, 0)
    return out, (x > 0)


def relu_backward(cache, dout: Array) -> Array:
    return dout * cache


def dropout_forward(x: Array, keep_prob: float, rng, mode: str):
    """Inverted dropout. Returns (output, scaled mask).

    Train mode zeroes dropped units and scales kept units by 1/keep_prob;
    eval mode is the identity and consumes no randomness.
    """
    if keep_prob <= 0 or keep_prob > 1:
        raise ConfigurationError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if mode == "eval" or keep_prob == 1.0:
        return x, np.ones_like(x)
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return x * mask, mask


def dropout_backward(mask: Array, dout: Array) -> Array:
    return dout * mask


def dense_forward(x: Array, weight: Array, bias: Array):
    """x: (N, in), weight: (in, out), bias: (out,)."""
    if x.shape[1] != weight.shape[0]:
        raise ConfigurationError(
            f"dense input width {x.shape[1]} != weight rows {weight.shape[0]}"
        )
    out = x @ weight + bias
    return out, (x, weight)


def dense_backward(cache, dout: Array):
    x, weight = cache
    dx = dout @ weight.T
    dweight = x.T @ dout
    dbias = dout.sum(axis=0)
    return dx, dweight, dbias


def softmax_cross_entropy(logits: Array, labels: Array):
    """Mean cross-entropy over the batch with max-subtraction stabilization.

    logits: (N, k); labels: (N,) int class indices.
    Returns (loss, probabilities, cache).
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ConfigurationError(f"labels must be in [0, {k}), got {labels}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    probs = exp / denom
    log_probs = shifted - np.log(denom)
    loss = -log_probs[np.arange(n), labels].mean()
    return loss, probs, (probs, labels)


def softmax_cross_entropy_backward(cache) -> Array:
    probs, labels = cache
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return dlogits
