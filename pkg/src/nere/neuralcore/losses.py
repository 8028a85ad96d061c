"""MSE loss and the L2 penalty on recurrent kernels."""

import numpy as np

from nere.errors import ShapeError


def mse_loss(pred, target):
    """Mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def mse_grad(pred, target):
    if pred.shape != target.shape:
        raise ShapeError(f"mse_grad shape mismatch: pred {pred.shape} vs target {target.shape}")
    return 2.0 * (pred - target) / pred.size


def l2_penalty(params, lam=0.001):
    return float(lam * sum(np.sum(p * p) for p in params))


def add_l2(loss, params, lam=0.001):
    """``loss + lam * sum(w^2)`` over the given (recurrent kernel) arrays."""
    return loss + l2_penalty(params, lam)


def l2_grad(param, lam=0.001):
    return 2.0 * lam * param
