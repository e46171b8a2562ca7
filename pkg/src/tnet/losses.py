"""Training losses."""

from __future__ import annotations

from .tensor import ShapeError, Tensor, mean, tsum

DICE_EPS = 1e-6


def dice_loss(pred, target, eps: float = DICE_EPS) -> Tensor:
    """Soft dice loss over [B,N,H,W] maps.

    Per map: 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps), averaged over the N maps
    and the batch, subtracted from 1. An empty target scores dice 0 here, so
    the loss is 1 for an all-zero pair.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} and target {target.shape} differ")
    if pred.data.ndim != 4:
        raise ShapeError(f"dice_loss expects [B,N,H,W], got {pred.shape}")
    inter = tsum(pred * target, axis=(2, 3))
    denom = tsum(pred * pred, axis=(2, 3)) + tsum(target * target, axis=(2, 3)) + eps
    return 1.0 - mean(2.0 * inter / denom)


def loc_loss(pred, target) -> Tensor:
    """Mean squared error over batch and both coordinates."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape or pred.data.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"loc_loss expects matching [B,2] tensors, got {pred.shape} and {target.shape}")
    diff = pred - target
    return mean(diff * diff)
