"""Differentiable primitives over Tensors.

Each primitive computes its forward value with numpy, verifies the
result is finite, and registers a backward closure on the active tape.
Reductions accumulate in float64 and cast back to the storage dtype.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, accumulate_grad, check_finite, record


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64)
    return g


def constant(value, dtype=np.float32, name=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype), requires_grad=False, name=name)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(check_finite(a.data + b.data, "add"))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g, b.data.shape))

    record("add", out, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(check_finite(a.data - b.data, "sub"))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, -_unbroadcast(g, b.data.shape))

    record("sub", out, (a, b), backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(check_finite(a.data * b.data, "mul"))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    record("mul", out, (a, b), backward)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        val = a.data / b.data
    out = Tensor._wrap(check_finite(val, "div"))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            accumulate_grad(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    record("div", out, (a, b), backward)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor._wrap(-a.data)

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, -g)

    record("neg", out, (a,), backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(check_finite(a.data * a.data.dtype.type(c), "scale"))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, g * a.data.dtype.type(c))

    record("scale", out, (a,), backward)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor._wrap(check_finite(a.data @ b.data, "matmul"))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, g @ b.data.T)
        if b.requires_grad:
            accumulate_grad(b, a.data.T @ g)

    record("matmul", out, (a, b), backward)
    return out


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got {a.shape}")
    out = Tensor._wrap(np.ascontiguousarray(a.data.T))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, np.ascontiguousarray(g.T))

    record("transpose2d", out, (a,), backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, g.reshape(a.data.shape))

    record("reshape", out, (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.maximum(a.data, 0))

    def backward(g):
        if a.requires_grad:
            # subgradient at 0 fixed to 0
            accumulate_grad(a, g * (a.data > 0))

    record("relu", out, (a,), backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype))

    def backward(g):
        if a.requires_grad:
            accumulate_grad(a, np.broadcast_to(g, a.data.shape))

    record("sum_all", out, (a,), backward)
    return out


def mean_axes(a: Tensor, axes: tuple, keepdims: bool = False) -> Tensor:
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    val = a.data.mean(axis=axes, dtype=np.float64, keepdims=keepdims)
    out = Tensor._wrap(check_finite(val.astype(a.data.dtype), "mean_axes"))

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            accumulate_grad(a, np.broadcast_to(gg / count, a.data.shape).astype(a.data.dtype))

    record("mean_axes", out, (a,), backward)
    return out


def rows_l2norm(a: Tensor) -> Tensor:
    """Per-row Euclidean norm of a 2-D tensor; subgradient 0 at the origin."""
    if a.data.ndim != 2:
        raise ShapeError(f"rows_l2norm expects (N, F), got {a.shape}")
    sq = np.einsum("ij,ij->i", a.data.astype(np.float64), a.data.astype(np.float64))
    norms = np.sqrt(sq)
    out = Tensor._wrap(check_finite(norms.astype(a.data.dtype), "rows_l2norm"))

    def backward(g):
        if a.requires_grad:
            safe = np.where(norms > 0, norms, 1.0)
            ga = (g / safe.astype(a.data.dtype))[:, None] * a.data
            ga[norms == 0] = 0
            accumulate_grad(a, ga)

    record("rows_l2norm", out, (a,), backward)
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """NCHW convolution via column unfolding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weights, got {x.shape}, {w.shape}")
    n, c, h, wd = x.data.shape
    co, ci, k, k2 = w.data.shape
    if k != k2 or ci != c:
        raise ShapeError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, K, K) -> (N, Ho*Wo, C*K*K)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * k * k)
    wmat = w.data.reshape(co, -1)
    val = cols @ wmat.T
    val = val.transpose(0, 2, 1).reshape(n, co, ho, wo) + b.data[None, :, None, None]
    out = Tensor._wrap(check_finite(val, "conv2d"))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n, ho * wo, co)
        if b.requires_grad:
            accumulate_grad(b, g.sum(axis=(0, 2, 3), dtype=np.float64))
        if w.requires_grad:
            gw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1]))
            accumulate_grad(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            dcols = gmat @ wmat  # (N, Ho*Wo, C*K*K)
            dcols = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += dcols[:, :, di, dj]
            accumulate_grad(x, gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp)

    record("conv2d", out, (x, w, b), backward)
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even.

    Ties route the gradient to the first maximal element of the window,
    keeping backward deterministic.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 expects NCHW, got {x.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = Tensor._wrap(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def backward(g):
        if x.requires_grad:
            g4 = np.zeros_like(win)
            np.put_along_axis(g4, idx[..., None], g[..., None], axis=-1)
            gx = g4.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            accumulate_grad(x, gx)

    record("maxpool2", out, (x,), backward)
    return out


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Training-mode batch normalization over (N,) or (N, H, W) per channel.

    Returns (out, batch_mean, batch_var) where the statistics are plain
    float arrays (biased variance) for the caller's running-stat update.
    """
    if x.data.ndim == 2:
        axes = (0,)
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    if x.data.shape[0] < 2:
        raise ShapeError("batch normalization in training mode needs batch size >= 2")
    ch = x.data.shape[1]
    if gamma.data.shape != (ch,) or beta.data.shape != (ch,):
        raise ShapeError(f"batchnorm parameter length {gamma.shape} != channels {ch}")
    m = int(np.prod([x.data.shape[ax] for ax in axes]))
    expand = (1, ch) + (1,) * (x.data.ndim - 2)

    mu64 = x.data.mean(axis=axes, dtype=np.float64)
    xc = x.data - mu64.astype(x.data.dtype).reshape(expand)
    var64 = np.square(xc, dtype=np.float64).mean(axis=axes, dtype=np.float64)
    invstd = (1.0 / np.sqrt(var64 + eps)).astype(x.data.dtype)
    xhat = xc * invstd.reshape(expand)
    val = gamma.data.reshape(expand) * xhat + beta.data.reshape(expand)
    out = Tensor._wrap(check_finite(val, "batchnorm_train"))

    def backward(g):
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=axes, dtype=np.float64))
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=axes, dtype=np.float64))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(expand)
            s1 = dxhat.sum(axis=axes, dtype=np.float64).reshape(expand)
            s2 = (dxhat * xhat).sum(axis=axes, dtype=np.float64).reshape(expand)
            gx = (invstd.reshape(expand) / m) * (m * dxhat - s1 - xhat * s2)
            accumulate_grad(x, gx.astype(x.data.dtype))

    record("batchnorm_train", out, (x, gamma, beta), backward)
    return out, mu64.astype(x.data.dtype), var64.astype(x.data.dtype)


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mu: np.ndarray, var: np.ndarray, eps: float) -> Tensor:
    """Inference-mode batch normalization using running statistics."""
    if x.data.ndim == 2:
        axes = (0,)
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
    else:
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    ch = x.data.shape[1]
    expand = (1, ch) + (1,) * (x.data.ndim - 2)
    invstd = (1.0 / np.sqrt(var.astype(np.float64) + eps)).astype(x.data.dtype)
    xhat = (x.data - mu.reshape(expand)) * invstd.reshape(expand)
    val = gamma.data.reshape(expand) * xhat + beta.data.reshape(expand)
    out = Tensor._wrap(check_finite(val, "batchnorm_eval"))

    def backward(g):
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=axes, dtype=np.float64))
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xhat).sum(axis=axes, dtype=np.float64))
        if x.requires_grad:
            accumulate_grad(x, g * (gamma.data * invstd).reshape(expand))

    record("batchnorm_eval", out, (x, gamma, beta), backward)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    """Fused stable softmax + cross-entropy against integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"label out of range [0, {c})")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    per_example = lse - z[np.arange(n), labels]
    if reduction == "mean":
        val = per_example.mean()
    elif reduction == "sum":
        val = per_example.sum()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = Tensor._wrap(np.asarray(val, dtype=logits.data.dtype))

    def backward(g):
        if logits.requires_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(n), labels] -= 1.0
            gg = float(g.reshape(()))
            if reduction == "mean":
                gg /= n
            accumulate_grad(logits, (p * gg).astype(logits.data.dtype))

    record("softmax_cross_entropy", out, (logits,), backward)
    return out


def cross_entropy_per_example(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient-free per-example cross-entropy in float64 (for oracles/metrics)."""
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return lse - z[np.arange(n), np.asarray(labels)]
