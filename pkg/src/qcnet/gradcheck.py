"""Finite-difference verification harness for the differentiable layers.

Runs an op on small random float64 inputs, reduces the output to a scalar
through a fixed random projection, and compares the analytic gradient of
every input element against central differences.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(fn, input_shapes, seed, h=1e-5, make_inputs=None):
    """Max relative error between analytic and numeric gradients.

    ``fn`` maps Tensors (one per shape) to a single output Tensor of any
    shape. The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    ``make_inputs`` overrides the default standard-normal draws when an op
    needs inputs away from a kink (e.g. relu).
    """
    rng = np.random.default_rng(seed)
    if make_inputs is not None:
        arrays = make_inputs(rng)
    else:
        arrays = [rng.standard_normal(s) for s in input_shapes]
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    inputs = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = fn(*inputs)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    def scalar_loss():
        out_val = fn(*(Tensor(a, dtype=np.float64) for a in arrays))
        return float((out_val.data * proj).sum())

    max_err = 0.0
    for idx, base in enumerate(arrays):
        flat = base.reshape(-1)
        a_flat = analytic[idx].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus = scalar_loss()
            flat[j] = orig - h
            minus = scalar_loss()
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(a_flat[j]), abs(numeric), 1e-8)
            max_err = max(max_err, abs(a_flat[j] - numeric) / denom)
    return max_err
