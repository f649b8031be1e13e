"""Differentiable layers for the volumetric classifier.

Every function takes and returns :class:`~qcnet.tensor.Tensor` values and
registers a backward closure on the tape. Convolution dispatches through
:mod:`~qcnet.backend`; the remaining layers are plain numpy.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .tensor import ShapeMismatch, Tensor, check_same_dtype, from_op


class InvalidTarget(ValueError):
    pass


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, zero_padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,D,H,W] with a [K,C,kd,kh,kw] kernel."""
    if x.data.ndim != 5 or w.data.ndim != 5 or b.data.ndim != 1:
        raise ShapeMismatch(f"conv3d expects 5D x, 5D w, 1D b; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    if b.shape[0] != w.shape[0]:
        raise ShapeMismatch(f"bias length {b.shape[0]} != filter count {w.shape[0]}")
    if stride < 1 or zero_padding < 0:
        raise ValueError("stride must be >= 1 and zero_padding >= 0")
    check_same_dtype(x, w, b)

    p = zero_padding
    kdims = w.shape[2:]
    for ax in range(3):
        if (x.shape[2 + ax] + 2 * p - kdims[ax]) // stride + 1 < 1:
            raise ShapeMismatch(
                f"kernel {kdims} with padding {p} does not fit input {x.shape[2:]}"
            )

    if p > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    else:
        xp = np.ascontiguousarray(x.data)
    out, ctx = backend.conv3d_forward(xp, w.data, b.data, stride)

    def backward(g):
        need_x = x.requires_grad
        gxp, gw, gb = backend.conv3d_backward(ctx, xp, w.data, g, stride, need_x)
        if w.requires_grad:
            w.accumulate_grad(gw)
        if b.requires_grad:
            b.accumulate_grad(gb)
        if need_x:
            if p > 0:
                gxp = gxp[:, :, p:-p, p:-p, p:-p]
            x.accumulate_grad(gxp)

    return from_op(out, (x, w, b), backward)


def batchnorm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over [N,C,D,H,W].

    Train mode normalizes by the batch mean and biased variance and nudges the
    running statistics by ``momentum``; eval mode normalizes by the running
    statistics and leaves them untouched.
    """
    if x.data.ndim != 5:
        raise ShapeMismatch(f"batchnorm3d expects 5D input, got {x.shape}")
    C = x.shape[1]
    for t, nm in ((gamma, "gamma"), (beta, "beta"), (running_mean, "running_mean"), (running_var, "running_var")):
        if t.shape != (C,):
            raise ShapeMismatch(f"{nm} must have shape ({C},), got {t.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    check_same_dtype(x, gamma, beta)

    axes = (0, 2, 3, 4)
    shape_c = (1, C, 1, 1, 1)
    g5 = gamma.data.reshape(shape_c)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean.data *= 1.0 - momentum
        running_mean.data += momentum * mu.astype(running_mean.dtype)
        running_var.data *= 1.0 - momentum
        running_var.data += momentum * var.astype(running_var.dtype)
    else:
        mu = running_mean.data.astype(x.dtype)
        var = running_var.data.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu.reshape(shape_c)) * inv_std.reshape(shape_c)
    out = g5 * xhat + beta.data.reshape(shape_c)

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=axes))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=axes))
        if x.requires_grad:
            inv5 = inv_std.reshape(shape_c)
            dxhat = g * g5
            if mode == "train":
                m = x.data.size // C
                dx = inv5 * (
                    dxhat
                    - dxhat.sum(axis=axes, keepdims=True) / m
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / m
                )
            else:
                dx = dxhat * inv5
            x.accumulate_grad(dx.astype(x.dtype, copy=False))

    return from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return from_op(np.where(mask, x.data, x.dtype.type(0)), (x,), backward)


def avgpool3d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Mean pooling; odd trailing extents are truncated (floor semantics)."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"avgpool3d expects 5D input, got {x.shape}")
    if window != stride:
        raise ValueError("only window == stride pooling is supported")
    N, C, D, H, W = x.shape
    od, oh, ow = D // window, H // window, W // window
    if min(od, oh, ow) < 1:
        raise ShapeMismatch(f"pooling window {window} does not fit input {x.shape[2:]}")
    cropped = x.data[:, :, : od * window, : oh * window, : ow * window]
    out = cropped.reshape(N, C, od, window, oh, window, ow, window).mean(axis=(3, 5, 7))

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        expanded = (
            np.broadcast_to(
                g[:, :, :, None, :, None, :, None],
                (N, C, od, window, oh, window, ow, window),
            )
            / x.dtype.type(window**3)
        )
        gx[:, :, : od * window, : oh * window, : ow * window] = expanded.reshape(
            N, C, od * window, oh * window, ow * window
        )
        x.accumulate_grad(gx)

    return from_op(out.astype(x.dtype, copy=False), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Collapse [N,C,D,H,W] to [N,C] by averaging the spatial axes."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"global_avg_pool expects 5D input, got {x.shape}")
    N, C, D, H, W = x.shape
    out = x.data.mean(axis=(2, 3, 4))

    def backward(g):
        if x.requires_grad:
            gx = np.broadcast_to(
                g[:, :, None, None, None] / x.dtype.type(D * H * W), x.shape
            )
            x.accumulate_grad(gx.astype(x.dtype, copy=False))

    return from_op(out.astype(x.dtype, copy=False), (x,), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map [N,F] @ [F,O] + [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatch(f"dense expects 2D x, 2D w, 1D b; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"incompatible dense shapes {x.shape} @ {w.shape} + {b.shape}")
    check_same_dtype(x, w, b)
    out = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_grad(x.data.T @ g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=0))

    return from_op(out, (x, w, b), backward)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax, max-subtracted for stability."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"softmax expects 2D logits, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=1, keepdims=True)
            logits.accumulate_grad(p * (g - dot))

    return from_op(p, (logits,), backward)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean negative log probability of the target class.

    Probabilities are floored at the dtype's tiny so the loss stays finite.
    Composed with :func:`softmax` the gradient through the logits reduces to
    (p - onehot) / N.
    """
    targets = np.asarray(targets)
    if probs.data.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects 2D probs, got {probs.shape}")
    N, C = probs.shape
    if targets.shape != (N,):
        raise ShapeMismatch(f"targets must have shape ({N},), got {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise InvalidTarget(f"targets must be integers, got dtype {targets.dtype}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= C:
        raise InvalidTarget(f"targets must lie in [0, {C})")

    tiny = np.finfo(probs.dtype).tiny
    p_t = np.maximum(probs.data[np.arange(N), targets], tiny)
    loss = -np.log(p_t).mean()

    def backward(g):
        if probs.requires_grad:
            gp = np.zeros_like(probs.data)
            gp[np.arange(N), targets] = -g.reshape(()) / (N * p_t)
            probs.accumulate_grad(gp)

    return from_op(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; a's channels come first."""
    if a.data.ndim != 5 or b.data.ndim != 5:
        raise ShapeMismatch(f"concat_channels expects 5D inputs, got {a.shape}, {b.shape}")
    if a.shape[1] < 1 or b.shape[1] < 1:
        raise ShapeMismatch("cannot concatenate an empty-channel tensor")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatch(f"non-channel dims differ: {a.shape} vs {b.shape}")
    check_same_dtype(a, b)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:, :ca])
        if b.requires_grad:
            b.accumulate_grad(g[:, ca:])

    return from_op(out, (a, b), backward)
