"""Finite-difference gradient oracle, independent of the backward pass.

Central differences evaluated through fresh forward passes; the only thing
shared with the engine is the forward computation being differentiated.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward


def numeric_gradient(f, tensor: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f() w.r.t. one tensor's data."""
    base = tensor.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        tensor.data = base.reshape(base.shape)
        hi = f().item()
        flat[i] = orig - h
        tensor.data = base.reshape(base.shape)
        lo = f().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    tensor.data = base
    return grad


def check_gradients(f, tensors, rtol: float = 1e-3, atol: float = 1e-6,
                    h: float = 1e-4) -> None:
    """Compare backward-pass gradients of scalar f() against central differences.

    Raises AssertionError naming the offending tensor index on mismatch.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    for idx, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(f, t, h=h)
        if not np.allclose(analytic, numeric, rtol=rtol, atol=atol):
            err = np.max(np.abs(analytic - numeric))
            raise AssertionError(
                f"gradient mismatch on tensor {idx}: max abs error {err:.3e}")
