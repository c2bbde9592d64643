"""Differentiable operations over :class:`~retro.autograd.Tensor`.

Storage is f32. Reductions, linear layers and softmax accumulate in f64 and
round once on the way out; convolutions run through f32 BLAS for speed.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from retro.autograd import DTYPE, DegenerateInputError, ShapeError, Tensor, record


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=DTYPE)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    return record((a, b), out, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data - b.data)
    return record((a, b), out, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    return record((a, b), out, lambda g: (g * b.data, g * a.data))


def scale(a, c: float) -> Tensor:
    a = _t(a)
    out = Tensor(a.data * DTYPE(c))
    return record((a,), out, lambda g: (g * DTYPE(c),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.maximum(x.data, DTYPE(0)))
    return record((x,), out, lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record((x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(tuple(tensors), out, backward)


# --- reductions ------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor(x.data.sum(dtype=np.float64))
    return record((x,), out, lambda g: (np.full(x.shape, g.reshape(-1)[0], dtype=DTYPE),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean(dtype=np.float64))
    return record((x,), out, lambda g: (np.full(x.shape, g.reshape(-1)[0] / n, dtype=DTYPE),))


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two [N, D] tensors, returned as [N, 1]."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"rowdot: need equal 2-D shapes, got {a.shape} and {b.shape}")
    out = Tensor(np.einsum("nd,nd->n", a.data.astype(np.float64), b.data)[:, None])
    return record((a, b), out, lambda g: (g * b.data, g * a.data))


def sum_squares_rows(x: Tensor) -> Tensor:
    """Row-wise squared Euclidean norm of an [N, D] tensor, as [N]."""
    out = Tensor(np.einsum("nd,nd->n", x.data.astype(np.float64), x.data))
    return record((x,), out, lambda g: (2.0 * g[:, None] * x.data,))


# --- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[N, K] @ [K, M] with f64 accumulation."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = Tensor(a64 @ b64)

    def backward(g):
        g64 = g.astype(np.float64)
        ga = _f32(g64 @ b64.T) if a.requires_grad else None
        gb = _f32(a64.T @ g64) if b.requires_grad else None
        return ga, gb

    return record((a, b), out, backward)


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T.copy())
    return record((x,), out, lambda g: (g.T,))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y[n, o] = sum_i x[n, i] * W[o, i] + b[o]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    x64, w64 = x.data.astype(np.float64), weight.data.astype(np.float64)
    y = x64 @ w64.T
    if bias is not None:
        y += bias.data
    out = Tensor(y)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g64 = g.astype(np.float64)
        gx = _f32(g64 @ w64) if x.requires_grad else None
        gw = _f32(g64.T @ x64) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = _f32(g64.sum(axis=0)) if bias.requires_grad else None
        return gx, gw, gb

    return record(inputs, out, backward)


# --- convolution -----------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ShapeError(
            f"non-integer output size: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return record((x,), out, lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


NCHW_TO_NHWC = (0, 2, 3, 1)
NHWC_TO_NCHW = (0, 3, 1, 2)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           layout: str = "NCHW") -> Tensor:
    """Cross-correlation with a [F, C, kh, kw] kernel (no bias).

    ``layout="NCHW"`` takes and returns [B, C, H, W]; ``"NHWC"`` takes and
    returns [B, H, W, C], which is what the encoder uses internally.
    """
    if layout == "NCHW":
        if x.data.ndim != 4:
            raise ShapeError(f"conv2d: expected 4-D input, got {x.shape}")
        y = _conv2d_nhwc(permute(x, NCHW_TO_NHWC), kernel, stride, padding)
        return permute(y, NHWC_TO_NCHW)
    if layout != "NHWC":
        raise ValueError(f"unknown layout {layout!r}")
    return _conv2d_nhwc(x, kernel, stride, padding)


def _conv2d_nhwc(x: Tensor, kernel: Tensor, stride: int, padding: int) -> Tensor:
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[3] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} (NHWC) incompatible with kernel {kernel.shape}")
    B, H, W, C = x.shape
    F, _, kh, kw = kernel.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    wmat = kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * C, F)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0

    if pointwise:
        cols = x.data.reshape(-1, C)
    else:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    out = Tensor((cols @ wmat).reshape(B, Ho, Wo, F))

    def backward(g):
        g2 = g.reshape(-1, F)
        gk = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((cols.T @ g2).reshape(kh, kw, C, F).transpose(3, 2, 0, 1))
        gx = None
        if x.requires_grad:
            dcols = g2 @ wmat.T
            if pointwise:
                gx = dcols.reshape(B, H, W, C)
            else:
                dcols = dcols.reshape(B, Ho, Wo, kh, kw, C)
                dxp = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=DTYPE)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
                gx = dxp[:, padding:padding + H, padding:padding + W] if padding else dxp
                gx = np.ascontiguousarray(gx)
        return gx, gk

    return record((x, kernel), out, backward)


# --- normalisation and pooling ---------------------------------------------

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
    channel_axis: int = 1,
) -> Tensor:
    """Batch normalisation over every axis except ``channel_axis``.

    In training mode batch statistics normalise the input and, if
    ``update_stats``, the running buffers are updated in place (unbiased
    variance, as torch does). In eval mode the running buffers are used.
    """
    if x.data.ndim == 4 and channel_axis in (1, -3):
        y = batchnorm(permute(x, NCHW_TO_NHWC), gamma, beta, running_mean, running_var,
                      training, update_stats, momentum, eps, channel_axis=-1)
        return permute(y, NHWC_TO_NCHW)
    if channel_axis not in (-1, x.data.ndim - 1):
        raise ValueError("batchnorm supports channel axis 1 (NCHW / [N, C]) or last (NHWC)")
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in train mode needs a batch of at least 2")
        mu = x2.sum(axis=0, dtype=np.float64) / n
        centered = x2 - _f32(mu)
        var = np.einsum("nc,nc->c", centered, centered, dtype=np.float64) / n
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    invstd = _f32(1.0 / np.sqrt(var + eps))
    if training:
        xhat = centered * invstd
        out = Tensor((xhat * gamma.data + beta.data).reshape(x.shape))
    else:
        # fixed statistics fold into one per-channel affine map
        gain = invstd * gamma.data.astype(np.float64)
        out = Tensor((x2 * _f32(gain) + _f32(beta.data - mu * gain)).reshape(x.shape))
        xhat = None

    def backward(g):
        g2 = g.reshape(-1, C)
        gsum = g2.sum(axis=0, dtype=np.float64)
        normed = xhat if xhat is not None else (x2 - _f32(mu)) * invstd
        gdot = np.einsum("nc,nc->c", g2, normed, dtype=np.float64)
        ggamma = _f32(gdot) if gamma.requires_grad else None
        gbeta = _f32(gsum) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            scale_ = invstd * gamma.data
            if training:
                gx = scale_ * (g2 - _f32(gsum / n) - normed * _f32(gdot / n))
            else:
                gx = g2 * scale_
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return record((x, gamma, beta), out, backward)


def global_avg_pool(x: Tensor, layout: str = "NCHW") -> Tensor:
    """[B, C, H, W] (or [B, H, W, C] with layout="NHWC") -> [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    axes = (2, 3) if layout == "NCHW" else (1, 2)
    hw = x.shape[axes[0]] * x.shape[axes[1]]
    out = Tensor(x.data.sum(axis=axes, dtype=np.float64) / hw)

    def backward(g):
        g = _f32(g / hw)
        g = g[:, :, None, None] if layout == "NCHW" else g[:, None, None, :]
        return (np.ascontiguousarray(np.broadcast_to(g, x.shape)),)

    return record((x,), out, backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row of an [N, D] tensor to unit Euclidean norm.

    A zero row raises :class:`DegenerateInputError`; there is no epsilon.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize expects 2-D input, got {x.shape}")
    x64 = x.data.astype(np.float64)
    norms = np.sqrt(np.einsum("nd,nd->n", x64, x64))
    if (norms == 0).any():
        bad = np.flatnonzero(norms == 0).tolist()
        raise DegenerateInputError(f"l2_normalize: zero-norm rows at indices {bad}")
    y = x64 / norms[:, None]
    out = Tensor(y)

    def backward(g):
        g64 = g.astype(np.float64)
        proj = np.einsum("nd,nd->n", g64, y)[:, None]
        return (_f32((g64 - y * proj) / norms[:, None]),)

    return record((x,), out, backward)


# --- classification --------------------------------------------------------

def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(logp)

    def backward(g):
        g64 = g.astype(np.float64)
        p = np.exp(logp)
        return (_f32(g64 - p * g64.sum(axis=1, keepdims=True)),)

    return record((logits,), out, backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    Uses max-subtraction; gradient is (softmax - onehot) / N.
    """
    targets = np.asarray(targets, dtype=np.int64)
    N = logits.shape[0]
    if targets.shape != (N,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} != ({N},)")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(N), targets]
    out = Tensor(nll.mean())

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(N), targets] -= 1.0
        return (_f32(p * (float(g.reshape(-1)[0]) / N)),)

    return record((logits,), out, backward)
