"""Convolution backend selection: compiled extension or numpy fallback.

The compiled kernels are picked at import when available; set
``QCNET_BACKEND=python`` (or call :func:`use`) to force the fallback.
Both backends implement identical contracts and agree to float tolerance;
each is bitwise deterministic on its own.
"""

from __future__ import annotations

import os

import numpy as np

from . import _conv_np

try:
    from . import _kernels

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - build without the extension
    _kernels = None
    HAVE_COMPILED = False

_VALID = ("compiled", "python")


def _initial():
    choice = os.environ.get("QCNET_BACKEND", "auto").lower()
    if choice == "python":
        return "python"
    if choice == "compiled" and not HAVE_COMPILED:
        raise ImportError("QCNET_BACKEND=compiled but the extension is not built")
    if choice in ("auto", "compiled"):
        return "compiled" if HAVE_COMPILED else "python"
    raise ValueError(f"QCNET_BACKEND must be auto|compiled|python, got {choice!r}")


_ACTIVE = _initial()


def current() -> str:
    return _ACTIVE


def use(name: str) -> None:
    """Switch backend explicitly (mainly for tests and the benchmark)."""
    global _ACTIVE
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise RuntimeError("compiled backend is not available")
    _ACTIVE = name


def conv3d_forward(xp, w, b, stride):
    """Cross-correlate padded input [N,C,Dp,Hp,Wp] with weight [K,C,kd,kh,kw].

    Returns (out, ctx); ctx is passed back to :func:`conv3d_backward`.
    """
    if _ACTIVE == "python":
        return _conv_np.conv3d_forward(xp, w, b, stride)
    N, C, Dp, Hp, Wp = xp.shape
    K, _, kd, kh, kw = w.shape
    od = (Dp - kd) // stride + 1
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1
    out = np.empty((N, K, od, oh, ow), dtype=xp.dtype)
    _kernels.conv3d_forward(xp, w, b, stride, out)
    return out, None


def conv3d_backward(ctx, xp, w, grad_out, stride, need_input_grad):
    """Gradients (grad_xp | None, grad_w, grad_b) for the padded input."""
    if _ACTIVE == "python":
        return _conv_np.conv3d_backward(ctx, xp, w, grad_out, stride, need_input_grad)
    grad_out = np.ascontiguousarray(grad_out)
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    grad_w = np.zeros_like(w)
    _kernels.conv3d_weight_grad(grad_out, xp, stride, grad_w)
    grad_xp = None
    if need_input_grad:
        grad_xp = np.zeros_like(xp)
        _kernels.conv3d_input_grad(grad_out, w, stride, grad_xp)
    return grad_xp, grad_w, grad_b
