"""Layer primitives with exact backward passes.

Reductions accumulate in float64 and the result is stored in the input dtype.
Backward functions are module-level so each one sees only the keyword
intermediates its forward chose to save.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, Tensor, make_output

# Activation patterns of kinked ops (relu sign masks, max-pool argmax), collected
# only while a `kink_probe` is active. gradcheck uses them to skip coordinates
# whose perturbation crosses a nondifferentiable point.
_kink_log: list[np.ndarray] | None = None


@contextmanager
def kink_probe() -> Iterator[list[np.ndarray]]:
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(pattern: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(pattern)


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


# ---------------------------------------------------------------- conv2d


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over a batch of NCHW images (no kernel flip)."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be 4-D [N,C,H,W], got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-D [Cout,Cin,kH,kW], got shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got stride={stride}, padding={padding}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d input channels: input has {cin}, weight expects {wcin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ValueError(f"conv2d kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ValueError(f"conv2d kernel width {kw} exceeds padded input width {wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if n == 0 or ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty: [{n},{cout},{ho},{wo}]")

    xp = np.pad(_f64(x.data), ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(cols)  # [N, Cin, Ho, Wo, kH, kW]
    w64 = _f64(weight.data)
    out = np.tensordot(cols, w64, axes=([1, 4, 5], [1, 2, 3]))  # [N, Ho, Wo, Cout]
    out = out.transpose(0, 3, 1, 2) + _f64(bias.data)[None, :, None, None]
    return make_output(
        out, "conv2d", (x, weight, bias), _conv2d_backward,
        cols=cols, weight=w64, input_shape=x.shape, stride=stride, padding=padding,
    )


def _conv2d_backward(g, *, cols, weight, input_shape, stride, padding):
    g = _f64(g)
    n, cin, h, w = input_shape
    _, _, kh, kw = weight.shape
    ho, wo = g.shape[2], g.shape[3]
    grad_b = g.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, weight[:, :, i, j], axes=([1], [0]))  # [N, Ho, Wo, Cin]
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
    grad_x = dxp[:, :, padding:padding + h, padding:padding + w]
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------- batch norm


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the batch statistics are used and the running estimates
    move by ``momentum`` toward them (unbiased variance for the running copy).
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm2d input must be 4-D, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d affine params must have shape ({c},), got {gamma.shape} and {beta.shape}")
    if eps <= 0:
        raise ValueError("batch_norm2d eps must be positive")
    if not 0.0 < momentum < 1.0:
        raise ValueError("batch_norm2d momentum must lie in (0, 1)")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 1:
        raise ValueError("batch_norm2d needs N*H*W >= 1")

    x64 = _f64(x.data)
    g64 = _f64(gamma.data)[None, :, None, None]
    if training:
        with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported just below
            mean = x64.mean(axis=(0, 2, 3))
            var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        if not (np.isfinite(mean).all() and np.isfinite(var).all()):
            raise NonFiniteError("batch_norm2d batch statistics overflowed")
        unbiased = var * count / (count - 1) if count > 1 else var
        running.mean[...] = (1 - momentum) * running.mean + momentum * mean
        running.var[...] = (1 - momentum) * running.var + momentum * unbiased
    else:
        mean = _f64(running.mean)
        var = _f64(running.var)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = x_hat * g64 + _f64(beta.data)[None, :, None, None]
    return make_output(
        out, "batch_norm2d", (x, gamma, beta), _batch_norm_backward,
        x_hat=x_hat, inv_std=inv_std, gamma=g64, training=training,
    )


def _batch_norm_backward(g, *, x_hat, inv_std, gamma, training):
    g = _f64(g)
    grad_gamma = (g * x_hat).sum(axis=(0, 2, 3))
    grad_beta = g.sum(axis=(0, 2, 3))
    dx_hat = g * gamma
    scale = inv_std[None, :, None, None]
    if training:
        m = g.shape[0] * g.shape[2] * g.shape[3]
        grad_x = scale / m * (
            m * dx_hat
            - dx_hat.sum(axis=(0, 2, 3), keepdims=True)
            - x_hat * (dx_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        grad_x = dx_hat * scale
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_kink(mask)
    return make_output(np.where(mask, x.data, 0), "relu", (x,), _relu_backward, mask=mask)


def _relu_backward(g, *, mask):
    return (g * mask,)


def sigmoid(x: Tensor) -> Tensor:
    # exp(-softplus(-x)) never overflows
    out = np.exp(-np.logaddexp(0.0, -_f64(x.data)))
    return make_output(out, "sigmoid", (x,), _sigmoid_backward, out=out)


def _sigmoid_backward(g, *, out):
    return (_f64(g) * out * (1.0 - out),)


# ---------------------------------------------------------------- pooling


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties resolve to the first element in row-major order."""
    if stride != k:
        raise ValueError("max_pool2d supports only non-overlapping windows (stride == k)")
    if x.data.ndim != 4:
        raise ValueError(f"max_pool2d input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"max_pool2d needs H and W divisible by {k}, got H={h}, W={w}")
    ho, wo = h // k, w // k
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    argmax = windows.argmax(axis=-1)
    _log_kink(argmax)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    return make_output(out, "max_pool2d", (x,), _max_pool_backward, argmax=argmax, k=k)


def _max_pool_backward(g, *, argmax, k):
    n, c, ho, wo = g.shape
    flat = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
    np.put_along_axis(flat, argmax[..., None], g[..., None], axis=-1)
    grad_x = flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    return (grad_x,)


def global_average_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"global_average_pool input must be 4-D, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h * w < 1:
        raise ValueError("global_average_pool needs H*W >= 1")
    out = _f64(x.data).mean(axis=(2, 3), keepdims=True)
    return make_output(out, "global_average_pool", (x,), _gap_backward, spatial=(h, w))


def _gap_backward(g, *, spatial):
    h, w = spatial
    return (np.broadcast_to(_f64(g) / (h * w), g.shape[:2] + (h, w)),)


def _adaptive_bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, math.ceil((i + 1) * size / out)) for i in range(out)]


def adaptive_average_pool(x: Tensor, out_h: int = 1, out_w: int = 1) -> Tensor:
    """Average pooling onto a fixed out_h x out_w grid, whatever the input size."""
    if x.data.ndim != 4:
        raise ValueError(f"adaptive_average_pool input must be 4-D, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if out_h < 1 or out_w < 1:
        raise ValueError("adaptive_average_pool output size must be positive")
    if out_h > h or out_w > w:
        raise ValueError(f"adaptive_average_pool output {out_h}x{out_w} larger than input {h}x{w}")
    if (out_h, out_w) == (1, 1):
        out = _f64(x.data).mean(axis=(2, 3), keepdims=True)
    else:
        x64 = _f64(x.data)
        out = np.empty(x.shape[:2] + (out_h, out_w))
        for i, (h0, h1) in enumerate(_adaptive_bins(h, out_h)):
            for j, (w0, w1) in enumerate(_adaptive_bins(w, out_w)):
                out[:, :, i, j] = x64[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
    return make_output(out, "adaptive_average_pool", (x,), _aap_backward, spatial=(h, w))


def _aap_backward(g, *, spatial):
    h, w = spatial
    g = _f64(g)
    oh, ow = g.shape[2], g.shape[3]
    grad_x = np.zeros(g.shape[:2] + (h, w))
    for i, (h0, h1) in enumerate(_adaptive_bins(h, oh)):
        for j, (w0, w1) in enumerate(_adaptive_bins(w, ow)):
            grad_x[:, :, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1] / ((h1 - h0) * (w1 - w0))
    return (grad_x,)


# ---------------------------------------------------------------- elementwise / dense


def channel_scale(features: Tensor, weights: Tensor) -> Tensor:
    """Y[n,c,h,w] = weights[n,c] * features[n,c,h,w]."""
    if features.data.ndim != 4:
        raise ValueError(f"channel_scale features must be 4-D, got shape {features.shape}")
    n, c = features.shape[:2]
    if weights.shape != (n, c, 1, 1):
        raise ValueError(f"channel_scale weights must have shape ({n}, {c}, 1, 1), got {weights.shape}")
    f64, w64 = _f64(features.data), _f64(weights.data)
    return make_output(f64 * w64, "channel_scale", (features, weights), _channel_scale_backward, features=f64, weights=w64)


def _channel_scale_backward(g, *, features, weights):
    g = _f64(g)
    return g * weights, (g * features).sum(axis=(2, 3), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return make_output(a.data + b.data, "add", (a, b), _add_backward)


def _add_backward(g):
    return g, g


def flatten(x: Tensor) -> Tensor:
    return make_output(x.data.reshape(x.shape[0], -1), "flatten", (x,), _flatten_backward, shape=x.shape)


def _flatten_backward(g, *, shape):
    return (g.reshape(shape),)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return make_output(x.data.reshape(shape), "reshape", (x,), _flatten_backward, shape=x.shape)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"linear input must be 2-D [N,Din], got shape {x.shape}")
    if weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"linear input dimension: input has {x.shape[1]}, weight shape is {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    x64, w64 = _f64(x.data), _f64(weight.data)
    out = x64 @ w64.T + _f64(bias.data)
    return make_output(out, "linear", (x, weight, bias), _linear_backward, x=x64, weight=w64)


def _linear_backward(g, *, x, weight):
    g = _f64(g)
    return g @ weight, g.T @ x, g.sum(axis=0)


# ---------------------------------------------------------------- loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = _f64(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> tuple[Tensor, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` under the row-wise softmax.

    Returns the scalar loss tensor and the probability matrix.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be 2-D [N,K], got shape {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if n < 1:
        raise ValueError("softmax_cross_entropy needs at least one row")
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"label {labels[i]} at position {i} outside [0, {k})")
    z = _f64(logits.data)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p_true = z[np.arange(n), labels] - log_norm
    loss = -log_p_true.mean()
    probs = np.exp(z - log_norm[:, None])
    out = make_output(np.asarray(loss), "softmax_cross_entropy", (logits,), _xent_backward, probs=probs, labels=labels)
    return out, probs.astype(logits.dtype)


def _xent_backward(g, *, probs, labels):
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    return (d * (_f64(g) / n),)
