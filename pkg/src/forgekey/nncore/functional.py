"""Fused layer primitives with hand-written backward passes.

Every op accepts arbitrary leading batch axes; samples along those axes never
interact, so a batch of B sequences is B independent graphs sharing weights.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, make_result


def _flat2(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: x{x.shape} incompatible with W{W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} != ({W.shape[1]},)")
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def bw(g):
        gx = g @ W.data.T
        gW = _flat2(x.data).T @ _flat2(g)
        if b is None:
            return gx, gW
        return gx, gW, _flat2(g).sum(axis=0)

    return make_result("linear", out, parents, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigError("layer_norm: eps must be positive")
    h = x.shape[-1]
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({h},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _flat2(g * xhat).sum(axis=0), _flat2(g).sum(axis=0)

    return make_result("layer_norm", out, (x, gamma, beta), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((g * (cdf + x.data * pdf)).astype(x.dtype, copy=False),)

    return make_result("gelu", out, (x,), bw)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain numpy softmax with max subtraction (no tape)."""
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


ATTN_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def multi_head_attention(x: Tensor, params, heads: int) -> Tensor:
    """Bidirectional scaled dot-product self-attention plus output projection.

    ``params`` maps wq/bq/wk/bk/wv/bv/wo/bo to tensors; x is (..., T, h).
    """
    h = x.shape[-1]
    if heads < 1 or h % heads:
        raise ConfigError(f"multi_head_attention: width {h} not divisible by {heads} heads")
    wq, bq, wk, bk, wv, bv, wo, bo = (params[k] for k in ATTN_KEYS)
    dh = h // heads
    scale = 1.0 / math.sqrt(dh)
    lead = x.shape[:-2]
    T = x.shape[-2]
    X = x.data

    def split(a):  # (..., T, h) -> (..., H, T, dh)
        return np.swapaxes(a.reshape(*lead, T, heads, dh), -2, -3)

    def merge(a):  # inverse of split
        return np.swapaxes(a, -2, -3).reshape(*lead, T, h)

    q = split(X @ wq.data + bq.data)
    k = split(X @ wk.data + bk.data)
    v = split(X @ wv.data + bv.data)
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    a = softmax(s, axis=-1).astype(X.dtype, copy=False)
    o = merge(a @ v)
    out = o @ wo.data + bo.data

    def bw(g):
        g2 = _flat2(g)
        gwo = _flat2(o).T @ g2
        gbo = g2.sum(axis=0)
        go = split(g @ wo.data.T)
        ga = go @ np.swapaxes(v, -1, -2)
        gv = np.swapaxes(a, -1, -2) @ go
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        gq, gk, gv = merge(gq), merge(gk), merge(gv)
        Xf = _flat2(X)
        gx = gq @ wq.data.T + gk @ wk.data.T + gv @ wv.data.T
        return (
            gx,
            Xf.T @ _flat2(gq), _flat2(gq).sum(axis=0),
            Xf.T @ _flat2(gk), _flat2(gk).sum(axis=0),
            Xf.T @ _flat2(gv), _flat2(gv).sum(axis=0),
            gwo, gbo,
        )

    return make_result("multi_head_attention", out, (x, wq, bq, wk, bk, wv, bv, wo, bo), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the leading axes.

    A single (C,) logit vector with an int label gives that sample's loss.
    """
    C = logits.shape[-1]
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_cross_entropy: labels {lab.shape} vs logits {logits.shape}")
    if np.any(lab < 0) or np.any(lab >= C):
        raise IndexError(f"softmax_cross_entropy: label out of range [0, {C})")
    z = _flat2(logits.data)
    lab1 = lab.reshape(-1)
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    rows = np.arange(z.shape[0])
    losses = lse[:, 0] - z[rows, lab1]
    n = z.shape[0]
    out = np.asarray(losses.mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse)
        p[rows, lab1] -= 1.0
        return ((p * (g / n)).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return make_result("softmax_cross_entropy", out, (as_tensor(logits),), bw)
