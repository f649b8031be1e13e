"""Slow reference implementations used to cross-check the fast kernels."""

from __future__ import annotations

import numpy as np


def naive_conv3d(x, w, b, stride=1, zero_padding=0):
    """Seven nested loops, no tricks. x [N,C,D,H,W], w [K,C,kd,kh,kw], b [K]."""
    x = np.asarray(x)
    w = np.asarray(w)
    b = np.asarray(b)
    p = zero_padding
    if p > 0:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    N, C, D, H, W = x.shape
    K, _, kd, kh, kw = w.shape
    od = (D - kd) // stride + 1
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    out = np.zeros((N, K, od, oh, ow), dtype=x.dtype)
    for n in range(N):
        for k in range(K):
            for zi in range(od):
                for yi in range(oh):
                    for xi in range(ow):
                        acc = 0.0
                        for c in range(C):
                            patch = x[
                                n,
                                c,
                                zi * stride : zi * stride + kd,
                                yi * stride : yi * stride + kh,
                                xi * stride : xi * stride + kw,
                            ]
                            acc += float((patch * w[k, c]).sum())
                        out[n, k, zi, yi, xi] = acc + b[k]
    return out


def confusion_counts(decisions, labels):
    """Brute-force confusion counter over parallel decision/label lists."""
    tp = fp = fn = tn = 0
    for d, y in zip(decisions, labels):
        if y == "artifact":
            if d == "artifact":
                tp += 1
            else:
                fn += 1
        else:
            if d == "artifact":
                fp += 1
            else:
                tn += 1
    return tp, fp, fn, tn
