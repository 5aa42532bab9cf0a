"""Neural-network operations built on the autodiff tensor.

Convolutions use an im2col layout so the heavy lifting stays inside BLAS.
Activation and normalization ops are fused (single graph node with a closed
form backward rule) to keep gradients numerically tight.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

from .tensor import ShapeError, Tensor, _make, _wrap, matmul, reshape
from .tensor import transpose as _transpose

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- activations ---------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf formulation."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + _erf(x.data / _SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _make(out.astype(x.dtype, copy=False), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_z

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        n = x.shape[-1]
        gxhat = g * gamma.data
        dx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        dbeta = g.sum(axis=reduce_axes) if reduce_axes else g
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``weight[indices]`` with scatter-add backward."""
    weight = _wrap(weight)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise IndexError(f"embedding: index out of range for table of {weight.shape[0]} rows")
    out = weight.data[idx]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return _make(out, (weight,), backward)


# -- convolutions ---------------------------------------------------------------
#
# Spatial tensors are channels-last (B, H, W, C): im2col windows then land in
# GEMM-ready memory order with a single copy and conv outputs need no transpose.


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution; (B, H, W, C) input, (F, C, kh, kw) weight, NHWC output."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[3] != weight.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and weight {weight.shape}")
    f, c, kh, kw = weight.shape
    b = x.shape[0]
    xd = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # (B, Ho, Wo, C, kh, kw) view; one copy puts the contraction axes last.
    windows = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    ho, wo = windows.shape[1], windows.shape[2]
    cols = np.ascontiguousarray(windows).reshape(b * ho * wo, c * kh * kw)
    w2 = weight.data.reshape(f, c * kh * kw)
    out = (cols @ w2.T).reshape(b, ho, wo, f)
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(b * ho * wo, f)
        dw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ w2).reshape(b, ho, wo, c, kh, kw)
        h_p, w_p = xd.shape[1], xd.shape[2]
        dpad = np.zeros((b, h_p, w_p, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dpad[:, i : i + ho * stride : stride, j : j + wo * stride : stride, :] += dcols[:, :, :, :, i, j]
        dx = dpad[:, pad : pad + x.shape[1], pad : pad + x.shape[2], :] if pad else dpad
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.reshape(-1, f).sum(axis=0))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), tuple(parents), backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Stride-``s`` transposed convolution with an s x s kernel (no overlap).

    Output spatial size is ``(in - 1) * s + s = in * s``; input is NHWC and
    the weight layout is (C_in, C_out, s, s).
    """
    x, weight = _wrap(x), _wrap(weight)
    if weight.shape[2] != stride or weight.shape[3] != stride:
        raise ShapeError(f"transposed_conv2d: kernel {weight.shape[2:]} must equal stride {stride}")
    if x.shape[3] != weight.shape[0]:
        raise ShapeError(f"transposed_conv2d: channel mismatch, input {x.shape} weight {weight.shape}")
    b, h, w, c = x.shape
    f = weight.shape[1]
    w2 = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(c, stride * stride * f)
    x2 = x.data.reshape(b * h * w, c)
    blocks = (x2 @ w2).reshape(b, h, w, stride, stride, f)
    out = np.ascontiguousarray(blocks.transpose(0, 1, 3, 2, 4, 5)).reshape(b, h * stride, w * stride, f)
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gb = g.reshape(b, h, stride, w, stride, f).transpose(0, 1, 3, 2, 4, 5)
        g2 = np.ascontiguousarray(gb).reshape(b * h * w, stride * stride * f)
        dx = (g2 @ w2.T).reshape(x.shape)
        dw = (x2.T @ g2).reshape(c, stride, stride, f).transpose(0, 3, 1, 2)
        grads = [dx, np.ascontiguousarray(dw)]
        if bias is not None:
            grads.append(g.reshape(-1, f).sum(axis=0))
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), tuple(parents), backward)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling over NHWC; odd trailing rows/cols are dropped."""
    x = _wrap(x)
    if kernel != 2 or stride != 2:
        raise ShapeError("maxpool2d: only kernel=2, stride=2 is supported")
    b, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    cropped = x.data[:, : ho * 2, : wo * 2, :]
    windows = cropped.reshape(b, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, ho, wo, c, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, : ho * 2, : wo * 2, :] = (
            gwin.reshape(b, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, ho * 2, wo * 2, c)
        )
        return (gx,)

    return _make(out, (x,), backward)


# -- attention -------------------------------------------------------------------


def multi_head_attention(
    x: Tensor,
    qkv_weight: Tensor,
    qkv_bias: Tensor,
    proj_weight: Tensor,
    proj_bias: Tensor,
    heads: int,
) -> Tensor:
    """Self-attention over sequences: softmax(QK^T / sqrt(d_head)) V per head.

    ``x`` is (B, N, h); heads are concatenated then linearly projected.
    Composed entirely from primitive ops so it inherits their gradients.
    """
    x = _wrap(x)
    b, n, h = x.shape
    if h % heads != 0:
        raise ShapeError(f"attention: hidden size {h} not divisible by {heads} heads")
    dh = h // heads
    qkv = matmul(x, qkv_weight) + qkv_bias  # (B, N, 3h)
    qkv = reshape(qkv, (b, n, 3, heads, dh))
    qkv = _transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, heads, N, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, _transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # (B, heads, N, dh)
    ctx = reshape(_transpose(ctx, (0, 2, 1, 3)), (b, n, h))
    return matmul(ctx, proj_weight) + proj_bias


# -- regularizers -------------------------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * Tensor(keep)


def stochastic_depth(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Drop an entire residual branch with probability ``p`` (training only).

    Kept samples are rescaled by 1/(1-p) so the expectation is unchanged;
    in eval mode the branch passes through untouched.
    """
    if not (0.0 <= p < 1.0):
        raise ValueError(f"stochastic_depth: rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng.random() < p:
        return x * 0.0
    return x * (1.0 / (1.0 - p))


# -- losses -------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer targets under row-wise softmax."""
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    m, k = logits.shape
    if t.size and (t.min() < 0 or t.max() >= k):
        raise IndexError(f"cross_entropy: target outside [0, {k})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    out = -log_probs[np.arange(m), t].mean()

    def backward(g):
        probs = np.exp(log_probs)
        probs[np.arange(m), t] -= 1.0
        return (probs * (g / m),)

    return _make(out, (logits,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0, reduction: str = "mean") -> Tensor:
    """Huber-style loss: quadratic inside ``beta``, linear outside."""
    pred = _wrap(pred)
    t = np.asarray(target, dtype=pred.dtype)
    diff = pred.data - t
    absd = np.abs(diff)
    vals = np.where(absd < beta, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    if reduction == "mean":
        out, scale = vals.mean(), 1.0 / vals.size
    elif reduction == "sum":
        out, scale = vals.sum(), 1.0
    else:
        raise ValueError(f"smooth_l1: unknown reduction {reduction!r}")

    def backward(g):
        return (np.clip(diff / beta, -1.0, 1.0).astype(pred.dtype) * (g * scale),)

    return _make(out, (pred,), backward)


def masked_select_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Select rows of a (..., N, h) tensor where boolean ``mask`` over N is true."""
    x = _wrap(x)
    m = np.asarray(mask, dtype=bool)
    flat = x.data.reshape(-1, x.shape[-1])
    if m.size != flat.shape[0]:
        raise ShapeError(f"masked_select_rows: mask of {m.size} entries vs {flat.shape[0]} rows")
    idx = np.flatnonzero(m.reshape(-1))
    out = flat[idx]

    def backward(g):
        gx = np.zeros_like(flat)
        gx[idx] = g
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward)
