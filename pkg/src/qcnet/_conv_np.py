"""Pure-numpy 3D convolution kernels (im2col + BLAS matmul).

The fallback backend used when the compiled extension is unavailable.
All functions take the *already padded* input ``xp`` of shape [N,C,Dp,Hp,Wp]
and a weight of shape [K,C,kd,kh,kw]; cross-correlation semantics.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_extent(full, k, stride):
    return (full - k) // stride + 1


def _im2col(xp, kdims, stride):
    """Column matrix [N, P, C*kd*kh*kw] of all kernel windows (P = D'*H'*W')."""
    N, C, Dp, Hp, Wp = xp.shape
    kd, kh, kw = kdims
    od = _out_extent(Dp, kd, stride)
    oh = _out_extent(Hp, kh, stride)
    ow = _out_extent(Wp, kw, stride)
    sN, sC, sD, sH, sW = xp.strides
    win = as_strided(
        xp,
        shape=(N, od, oh, ow, C, kd, kh, kw),
        strides=(sN, stride * sD, stride * sH, stride * sW, sC, sD, sH, sW),
        writeable=False,
    )
    return win.reshape(N, od * oh * ow, C * kd * kh * kw), (od, oh, ow)


def conv3d_forward(xp, w, b, stride):
    K = w.shape[0]
    cols, (od, oh, ow) = _im2col(xp, w.shape[2:], stride)
    out2 = cols @ w.reshape(K, -1).T
    out2 += b
    out = out2.transpose(0, 2, 1).reshape(xp.shape[0], K, od, oh, ow)
    return np.ascontiguousarray(out), cols


def conv3d_backward(ctx, xp, w, grad_out, stride, need_input_grad):
    cols = ctx if ctx is not None else _im2col(xp, w.shape[2:], stride)[0]
    N, K, od, oh, ow = grad_out.shape
    g2 = grad_out.reshape(N, K, od * oh * ow)
    grad_b = g2.sum(axis=(0, 2))
    grad_w = np.tensordot(g2, cols, axes=([0, 2], [0, 1])).reshape(w.shape)
    grad_xp = _input_grad(grad_out, w, stride, xp.shape) if need_input_grad else None
    return grad_xp, grad_w, grad_b


def _input_grad(grad_out, w, stride, xp_shape):
    # Transposed convolution: dilate the output gradient by the stride, pad by
    # k-1, then correlate with the channel-swapped, spatially flipped weight.
    N, K, od, oh, ow = grad_out.shape
    kd, kh, kw = w.shape[2:]
    if stride > 1:
        gd = np.zeros(
            (N, K, (od - 1) * stride + 1, (oh - 1) * stride + 1, (ow - 1) * stride + 1),
            dtype=grad_out.dtype,
        )
        gd[:, :, ::stride, ::stride, ::stride] = grad_out
    else:
        gd = grad_out
    gp = np.pad(gd, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    zero_bias = np.zeros(wt.shape[0], dtype=grad_out.dtype)
    gx, _ = conv3d_forward(gp, wt, zero_bias, 1)
    # strides that do not divide the input may leave trailing voxels unseen
    tail = [xp_shape[2 + i] - gx.shape[2 + i] for i in range(3)]
    if any(tail):
        gx = np.pad(gx, ((0, 0), (0, 0), (0, tail[0]), (0, tail[1]), (0, tail[2])))
    return gx
