"""Fused differentiable primitives used by the two porosity models."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import EmptyBatchError, ShapeError
from .tensor import Tensor, _record, unbroadcast

BCE_EPS = 1e-7


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    return _record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z * z * z)
    th = np.tanh(inner)
    out = 0.5 * z * (1.0 + th)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * dinner),)

    return _record("gelu", out, (x,), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=axis, keepdims=True, dtype=np.float64)
    out = (e / total).astype(z.dtype)

    def backward_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True, dtype=np.float64).astype(z.dtype)
        return (out * (g - dot),)

    return _record("softmax", out, (x,), backward_fn)


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise each slice along ``axis`` to zero mean and unit variance, then
    apply the optional affine ``gain``/``bias`` (broadcast against ``x``)."""
    z = x.data
    n = z.shape[axis]
    mu = z.mean(axis=axis, keepdims=True, dtype=np.float64)
    var = np.square(z - mu).mean(axis=axis, keepdims=True, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(z.dtype)
    xhat = ((z - mu) * inv_std).astype(z.dtype)
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward_fn(g):
        dxhat = g * gain.data if gain is not None else g
        s1 = dxhat.sum(axis=axis, keepdims=True, dtype=np.float64)
        s2 = (dxhat * xhat).sum(axis=axis, keepdims=True, dtype=np.float64)
        dx = (inv_std / n * (n * dxhat - s1 - xhat * s2)).astype(z.dtype)
        grads = [dx]
        if gain is not None:
            grads.append(unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            grads.append(unbroadcast(g, bias.shape))
        return tuple(grads)

    return _record("layer_norm", out, tuple(parents), backward_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; in eval mode the running statistics
    are used and the op is affine in ``x``.
    """
    z = x.data
    if z.shape[0] == 0:
        raise EmptyBatchError("batch_norm received an empty batch")
    axes = (0,) + tuple(range(2, z.ndim))
    bshape = [1] * z.ndim
    bshape[1] = z.shape[1]
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)

    if training:
        m = z.size // z.shape[1]
        mu = z.mean(axis=axes, dtype=np.float64)
        var = np.square(z - mu.reshape(bshape)).mean(axis=axes, dtype=np.float64)
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + eps)).astype(z.dtype).reshape(bshape)
    xhat = ((z - mu.reshape(bshape).astype(z.dtype)) * inv_std).astype(z.dtype)
    out = xhat * g_ + b_

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=axes, dtype=np.float64).astype(gamma.dtype)
        dbeta = g.sum(axis=axes, dtype=np.float64).astype(beta.dtype)
        dxhat = g * g_
        if training:
            n = z.size // z.shape[1]
            s1 = dxhat.sum(axis=axes, keepdims=True, dtype=np.float64)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True, dtype=np.float64)
            dx = (inv_std / n * (n * dxhat - s1 - xhat * s2)).astype(z.dtype)
        else:
            dx = dxhat * inv_std
        return dx, dgamma.reshape(gamma.shape), dbeta.reshape(beta.shape)

    return _record("batch_norm", out, (x, gamma, beta), backward_fn)


def conv_output_size(n: int, kernel: int = 3, stride: int = 2, pad: int = 1) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s_n, s_c, s_h, s_w = xp.strides
    view = as_strided(
        xp, shape=(c, k, k, n, oh, ow),
        strides=(s_c, s_h, s_w, s_n, s_h * stride, s_w * stride), writeable=False)
    return view.reshape(c * k * k, n * oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2,
           pad: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (N x C x H x W, or unbatched C x H x W)
    with square kernels ``w`` (C_out x C_in x k x k)."""
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    c_out, c_in, k, k2 = w.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    if k != k2:
        raise ShapeError("conv2d needs square kernels")
    oh = conv_output_size(h, k, stride, pad)
    ow = conv_output_size(wd, k, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d input {h}x{wd} too small for kernel {k}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, oh, ow)
    w2 = w.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.reshape(1, c_out, 1, 1)
    out = np.ascontiguousarray(out)
    need_x = x.requires_grad
    need_w = w.requires_grad
    if not need_w:
        cols = None

    def backward_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if need_w else None
        gx = None
        if need_x:
            dcols = (w2.T @ g2).reshape(c, k, k, n, oh, ow)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                        j:j + stride * (ow - 1) + 1:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        grads = (gx, gw)
        if b is not None:
            grads += (g.sum(axis=(0, 2, 3), dtype=np.float64).astype(b.dtype),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    result = _record("conv2d", out, parents, backward_fn)
    if unbatched:
        result = result.reshape(result.shape[1:])
    return result


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    z = x.data
    out = z.repeat(factor, axis=-2).repeat(factor, axis=-1)
    h, w = z.shape[-2:]

    def backward_fn(g):
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1), dtype=np.float64).astype(z.dtype),)

    return _record("upsample", out, (x,), backward_fn)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is (in, out)."""
    lead = x.shape[:-1]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {w.shape[0]}")
    flat = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
    out = flat @ w
    if b is not None:
        out = out + b
    return out.reshape(lead + (w.shape[1],)) if x.ndim != 2 else out


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(getattr(target, "data", target), dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    out = np.asarray(np.mean(np.square(diff), dtype=np.float64), dtype=pred.dtype)
    scale = 2.0 / diff.size
    return _record("mse", out, (pred,), lambda g: (g * scale * diff,))


def bce_loss(pred: Tensor, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross entropy of probabilities ``pred`` against 0/1 targets;
    predictions are clamped to [eps, 1 - eps]."""
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeError(f"bce_loss shapes differ: {pred.shape} vs {target.shape}")
    p = pred.data.astype(np.float64)
    pc = np.clip(p, eps, 1.0 - eps)
    losses = -(target * np.log(pc) + (1.0 - target) * np.log(1.0 - pc))
    out = np.asarray(losses.mean(), dtype=pred.dtype)
    inside = (p >= eps) & (p <= 1.0 - eps)
    n = p.size

    def backward_fn(g):
        d = (pc - target) / (pc * (1.0 - pc)) / n * inside
        return ((g * d).astype(pred.dtype),)

    return _record("bce", out, (pred,), backward_fn)


__all__ = [
    "relu", "sigmoid", "gelu", "softmax", "layer_norm", "batch_norm", "conv2d",
    "conv_output_size", "upsample_nearest2d", "linear", "mse_loss", "bce_loss",
]
