"""Central finite-difference checking of tape gradients."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, no_grad, sum_all


def numeric_gradient(fn, tensors, index, step=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. tensors[index].

    ``fn`` must read the current ``.data`` of the given tensors each call.
    """
    t = tensors[index]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric):
    """Elementwise |a - n| / max(1, |a|, |n|), reduced with max."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn, tensors, step=1e-5):
    """Compare tape gradients of scalar ``fn()`` against finite differences.

    Returns the maximum relative error over all checked tensors.
    """
    def scalar_fn():
        out = fn()
        return out if out.data.ndim == 0 else sum_all(out)

    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    scalar_fn().backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(scalar_fn, tensors, i, step=step)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def random_tensor(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)
