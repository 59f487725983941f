"""Neural-network primitives built on the tensor engine.

All ops register backward rules on the tape and are exact-gradient
(verified against central finite differences in the test suite).
"""

from __future__ import annotations

import numpy as np

from .tensor import (Array, DimensionError, Tensor, _as_tensor, _record,
                     _sum_to_shape)

_SOFTPLUS_CUTOFF = 30.0  # softplus(x) == x above this, to error < 1e-13


class LabelError(ValueError):
    """A classification label lies outside [0, num_classes)."""


class GeometryError(ValueError):
    """Convolution geometry is invalid (kernel longer than padded input)."""


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def linear(x, W, b=None) -> Tensor:
    """Affine map over the last axis: ``y[..., j] = sum_i x[..., i] W[i, j] + b[j]``."""
    x = _as_tensor(x)
    W = _as_tensor(W, like=x)
    if x.shape[-1] != W.shape[0]:
        raise DimensionError(
            f"linear: last axis of x is {x.shape[-1]} but W expects {W.shape[0]}")
    data = x.data @ W.data
    if b is not None:
        b = _as_tensor(b, like=x)
        if b.shape != (W.shape[1],):
            raise DimensionError(
                f"linear: bias shape {b.shape} != ({W.shape[1]},) (output axis)")
        data = data + b.data

    def backward(g: Array):
        gx = g @ W.data.T
        lead = g.reshape(-1, g.shape[-1])
        gW = x.data.reshape(-1, x.shape[-1]).T @ lead
        gb = None if b is None else lead.sum(axis=0)
        return (gx, gW, gb) if b is not None else (gx, gW)

    inputs = (x, W) if b is None else (x, W, b)
    return _record("linear", data, inputs, backward)


# ---------------------------------------------------------------------------
# 1D convolution
# ---------------------------------------------------------------------------

def _conv_geometry(L: int, K: int, stride: int, padding) -> tuple[int, int, int]:
    """Resolve (left_pad, right_pad, L_out); ``padding`` is an int (symmetric)
    or the string ``"causal"`` (left pad of K-1, output depends on past only)."""
    if padding == "causal":
        left, right = K - 1, 0
    else:
        left = right = int(padding)
    total = L + left + right
    if K > total:
        raise GeometryError(
            f"conv1d: kernel {K} exceeds padded length {total} (L={L}, pad={left}+{right})")
    L_out = (total - K) // stride + 1
    return left, right, L_out


def conv1d(x, W, b=None, stride: int = 1, padding: int | str = 0,
           groups: int = 1) -> Tensor:
    """Grouped 1D convolution (cross-correlation) over the last axis.

    x: [B, C_in, L]; W: [C_out, C_in/groups, K]; returns [B, C_out, L_out]
    with ``L_out = (L + pads - K)//stride + 1``.  ``padding="causal"``
    left-pads by K-1 so output[t] depends only on input[<= t].
    """
    x = _as_tensor(x)
    W = _as_tensor(W, like=x)
    if x.ndim != 3 or W.ndim != 3:
        raise DimensionError("conv1d expects x [B,C,L] and W [C_out,C_in/g,K]")
    B, C_in, L = x.shape
    C_out, C_g, K = W.shape
    if C_in % groups or C_out % groups:
        raise DimensionError(
            f"conv1d: channels ({C_in} in, {C_out} out) not divisible by groups={groups}")
    if C_g != C_in // groups:
        raise DimensionError(
            f"conv1d: W expects {C_g} channels/group but C_in/groups = {C_in // groups}")
    left, right, L_out = _conv_geometry(L, K, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    span = (L_out - 1) * stride + K  # used region of the padded signal

    depthwise = groups == C_in and C_out == C_in
    if depthwise:
        data = np.zeros((B, C_out, L_out), dtype=x.data.dtype)
        for k in range(K):
            data += W.data[:, 0, k][None, :, None] * xp[:, :, k:k + span - K + 1:stride]
    elif groups == 1:
        win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
        data = np.einsum("bclk,ock->bol", win, W.data, optimize=True)
    else:
        cg_in, cg_out = C_in // groups, C_out // groups
        win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
        data = np.empty((B, C_out, L_out), dtype=x.data.dtype)
        for gi in range(groups):
            data[:, gi * cg_out:(gi + 1) * cg_out] = np.einsum(
                "bclk,ock->bol", win[:, gi * cg_in:(gi + 1) * cg_in],
                W.data[gi * cg_out:(gi + 1) * cg_out], optimize=True)
    if b is not None:
        b = _as_tensor(b, like=x)
        if b.shape != (C_out,):
            raise DimensionError(f"conv1d: bias shape {b.shape} != ({C_out},)")
        data = data + b.data[None, :, None]

    def backward(g: Array):
        gxp = np.zeros_like(xp)
        gW = np.zeros_like(W.data)
        if depthwise:
            for k in range(K):
                seg = xp[:, :, k:k + span - K + 1:stride]
                gW[:, 0, k] = (g * seg).sum(axis=(0, 2))
                gxp[:, :, k:k + span - K + 1:stride] += W.data[:, 0, k][None, :, None] * g
        elif groups == 1:
            win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
            gW[...] = np.einsum("bclk,bol->ock", win, g, optimize=True)
            tmp = np.einsum("bol,ock->bclk", g, W.data, optimize=True)
            for k in range(K):
                gxp[:, :, k:k + span - K + 1:stride] += tmp[:, :, :, k]
        else:
            cg_in, cg_out = C_in // groups, C_out // groups
            win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)[:, :, ::stride, :]
            for gi in range(groups):
                sl_in = slice(gi * cg_in, (gi + 1) * cg_in)
                sl_out = slice(gi * cg_out, (gi + 1) * cg_out)
                gW[sl_out] = np.einsum("bclk,bol->ock", win[:, sl_in], g[:, sl_out],
                                       optimize=True)
                tmp = np.einsum("bol,ock->bclk", g[:, sl_out], W.data[sl_out],
                                optimize=True)
                for k in range(K):
                    gxp[:, sl_in, k:k + span - K + 1:stride] += tmp[:, :, :, k]
        gx = gxp[:, :, left:left + L] if (left or right) else gxp
        gb = None if b is None else g.sum(axis=(0, 2))
        out = (np.ascontiguousarray(gx), gW)
        return out + (gb,) if b is not None else out

    inputs = (x, W) if b is None else (x, W, b)
    return _record("conv1d", data, inputs, backward)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, like=x)
    beta = _as_tensor(beta, like=x)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(
            f"layernorm: gamma/beta must have shape ({D},), got {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data

    def backward(g: Array):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _record("layernorm", data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def _sigmoid_np(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x) -> Tensor:
    """x * sigmoid(x)."""
    x = _as_tensor(x)
    s = _sigmoid_np(x.data)
    data = x.data * s
    return _record("silu", data, (x,),
                   lambda g: (g * (s + x.data * s * (1.0 - s)),))


def softplus(x) -> Tensor:
    """log(1 + e^x), with the identity branch above the overflow cutoff."""
    x = _as_tensor(x)
    big = x.data > _SOFTPLUS_CUTOFF
    data = np.where(big, x.data, np.log1p(np.exp(np.where(big, 0.0, x.data))))
    s = _sigmoid_np(x.data)
    return _record("softplus", data, (x,), lambda g: (g * s,))


def safe_sqrt(x) -> Tensor:
    """Square root with a zero subgradient at x == 0 (for std-style losses
    that must evaluate to exactly 0 on degenerate-variance inputs)."""
    x = _as_tensor(x)
    r = np.sqrt(x.data)
    safe = np.where(r > 0, r, 1.0)
    return _record("safe_sqrt", r, (x,),
                   lambda g: (np.where(r > 0, g * 0.5 / safe, 0.0),))


def softmax(x, axis: int = -1) -> Tensor:
    """Rows along ``axis`` sum to 1; -inf entries yield exact zeros."""
    x = _as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _record("softmax", p, (x,), backward)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    data = m + np.log(s)
    if not keepdims:
        data = np.squeeze(data, axis=axis)
    p = e / s

    def backward(g: Array):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * p,)

    return _record("logsumexp", data, (x,), backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood over a batch, log-sum-exp stabilized.

    logits: [B, C]; labels: int array [B] with values in [0, C).
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy expects logits of shape [B, C]")
    B, C = logits.shape
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} != ({B},)")
    if labels.min() < 0 or labels.max() >= C:
        raise LabelError(
            f"labels must lie in [0, {C}); got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s)).reshape(-1)
    data = np.asarray((lse - logits.data[np.arange(B), labels]).mean(),
                      dtype=logits.data.dtype)
    p = e / s

    def backward(g: Array):
        gx = p.copy()
        gx[np.arange(B), labels] -= 1.0
        return (gx * (g / B),)

    return _record("cross_entropy", data, (logits,), backward)
