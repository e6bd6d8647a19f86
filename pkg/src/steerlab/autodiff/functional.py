"""Differentiable operators used by the denoiser, adapters and metrics.

Image tensors are channels-last, ``[B, H, W, C]``; convolution kernels keep the
conventional ``[O, C, 3, 3]`` layout. Reductions run in a fixed sequential
order so forward passes are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, ShapeError
from .tensor import Tensor, _lift, make_node

GN_EPS = 1e-5


def linear(x, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W + b`` over the last axis of ``x``; ``W`` is ``[in, out]``."""
    x = _lift(x, W)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    y = x2 @ W.data
    if b is not None:
        y = y + b.data
    out_shape = lead + (W.shape[1],)

    def rule(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        return (gx, gW, gb) if b is not None else (gx, gW)

    parents = (x, W, b) if b is not None else (x, W)
    return make_node(y.reshape(out_shape), parents, rule)


def conv2d(x, k: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation with zero padding 1 (spatial size preserved).

    ``x`` is ``[B, H, W, C]``, ``k`` is ``[O, C, 3, 3]``, output ``[B, H, W, O]``.
    """
    x = _lift(x, k)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected [B,H,W,C] input, got {x.shape}")
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected [O,C,3,3] kernel, got {k.shape}")
    B, H, W, C = x.shape
    O = k.shape[0]
    if k.shape[1] != C:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {k.shape}")
    xp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x.data
    wk = np.ascontiguousarray(k.data.transpose(2, 3, 1, 0))  # [3,3,C,O]
    out = xp[:, 0:H, 0:W] @ wk[0, 0]
    for i in range(3):
        for j in range(3):
            if i or j:
                out += xp[:, i:i + H, j:j + W] @ wk[i, j]
    if b is not None:
        out += b.data

    def rule(g):
        gx = gk = gb = None
        if x.requires_grad:
            wt = np.ascontiguousarray(k.data.transpose(2, 3, 0, 1))  # [3,3,O,C]
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + H, j:j + W] += g @ wt[i, j]
            gx = gxp[:, 1:-1, 1:-1]
        if k.requires_grad:
            cols = np.empty((B, H, W, 3, 3, C), dtype=x.dtype)
            for i in range(3):
                for j in range(3):
                    cols[:, :, :, i, j] = xp[:, i:i + H, j:j + W]
            gk = (cols.reshape(-1, 9 * C).T @ g.reshape(-1, O))  # [9C, O]
            gk = gk.reshape(3, 3, C, O).transpose(3, 2, 0, 1)
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, O).sum(axis=0)
        return (gx, gk, gb) if b is not None else (gx, gk)

    parents = (x, k, b) if b is not None else (x, k)
    return make_node(out, parents, rule)


def group_norm(x: Tensor, groups: int, eps: float = GN_EPS) -> Tensor:
    """Affine-free group normalisation of a ``[B, H, W, C]`` tensor.

    Statistics are accumulated in float64 so a constant group normalises to
    exact zeros.
    """
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected [B,H,W,C] input, got {x.shape}")
    B, H, W, C = x.shape
    if groups < 1 or C % groups:
        raise ConfigurationError(f"group_norm: {C} channels not divisible into {groups} groups")
    if not eps > 0:
        raise ConfigurationError("group_norm: eps must be positive")
    cg = C // groups
    n = H * W * cg
    x3 = x.data.reshape(B, H * W, C)

    def group_mean(per_channel: np.ndarray) -> np.ndarray:
        # [B, C] float64 channel sums -> [B, 1, C] group means broadcast back to channels
        gm = per_channel.reshape(B, groups, cg).sum(axis=-1) / n
        return np.repeat(gm, cg, axis=1)[:, None, :]

    mean = group_mean(x3.sum(axis=1, dtype=np.float64)).astype(x.dtype)
    xc = x3 - mean
    var = group_mean(np.einsum("bnc,bnc->bc", xc, xc, dtype=np.float64))
    rstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * rstd

    def rule(g):
        g3 = g.reshape(x3.shape)
        m1 = group_mean(g3.sum(axis=1, dtype=np.float64)).astype(x.dtype)
        m2 = group_mean(np.einsum("bnc,bnc->bc", g3, xhat, dtype=np.float64)).astype(x.dtype)
        return ((rstd * (g3 - m1 - xhat * m2)).reshape(x.shape),)

    return make_node(xhat.reshape(x.shape), (x,), rule)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data
    return make_node(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "silu":
        return silu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def avg_pool2(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial size {H}x{W} is not even")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def rule(g):
        g4 = (g * 0.25)[:, :, None, :, None, :]
        return (np.broadcast_to(g4, (B, H // 2, 2, W // 2, 2, C)).reshape(x.shape),)

    return make_node(out.astype(x.dtype, copy=False), (x,), rule)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    B, H, W, C = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (B, H, 2, W, 2, C)).reshape(B, 2 * H, 2 * W, C)

    def rule(g):
        return (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)

    return make_node(out, (x,), rule)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")

    def rule(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return make_node(table.data[ids], (table,), rule)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    d = pred.data - target
    n = d.size
    val = np.asarray(np.square(d).sum(dtype=np.float64) / n, dtype=pred.dtype)
    return make_node(val, (pred,), lambda g: (g * (2.0 / n) * d,))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = logits.shape[0]
    val = np.asarray(-logp[np.arange(B), labels].mean(dtype=np.float64), dtype=logits.dtype)

    def rule(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (g * p / B,)

    return make_node(val, (logits,), rule)
