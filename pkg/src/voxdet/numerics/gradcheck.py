"""Central-difference validation of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tape, Tensor, backward

__all__ = ["grad_check", "set_gradient_corruption"]

# Test hook: when non-zero, grad_check perturbs the analytic gradient by this
# amount before comparing, to prove the failure path fires end to end.
_CORRUPTION = 0.0


def set_gradient_corruption(amount: float) -> None:
    global _CORRUPTION
    _CORRUPTION = float(amount)


def grad_check(function: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` must map a tensor to a scalar tensor and be re-evaluable.
    The relative error per coordinate uses an absolute floor of 1e-8 in the
    denominator so near-zero gradients compare on an absolute scale.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = function(x)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(tape, out)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.copy()
    if _CORRUPTION:
        analytic = analytic + _CORRUPTION

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = function(Tensor(base.copy())).item()
        flat[i] = orig - eps
        f_minus = function(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
