"""Scalar training losses."""

from __future__ import annotations

import numpy as np

from gseal.errors import ShapeError, ValidationError
from gseal.gradcore.tensor import Tensor, as_tensor, softplus

__all__ = ["bce_with_logits", "mse"]


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits.

    Uses mean(softplus(l) - t*l), which is exact and never exponentiates
    a positive logit. Targets must be 0/1 and match the logit shape.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce targets {t.shape} must match logits {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValidationError("bce targets must be exactly 0 or 1")
    return (softplus(logits) - logits * t).mean()


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()
