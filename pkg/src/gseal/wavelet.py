"""Single-level 2-D Haar transform.

The default scaling is plain averaging: the LL coefficient of a 2x2 block
is its mean, and the three detail bands carry the signed quarter-sums that
make reconstruction exact. An orthonormal variant (divide by 2 rather
than 4) is available for energy bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gseal.errors import ShapeError, ValidationError
from gseal.gradcore.tensor import Tensor, as_tensor, custom_op

__all__ = ["SubbandSet", "dwt2", "idwt2", "ll"]

_SCALES = {"average": 4.0, "ortho": 2.0}


@dataclass
class SubbandSet:
    """One analysis level: low-pass LL plus LH/HL/HH details."""

    LL: np.ndarray
    LH: np.ndarray
    HL: np.ndarray
    HH: np.ndarray
    height: int
    width: int
    scaling: str = "average"


def _blocks(img: np.ndarray):
    H, W = img.shape[-2], img.shape[-1]
    v = img.reshape(*img.shape[:-2], H // 2, 2, W // 2, 2)
    a = v[..., 0, :, 0]
    b = v[..., 0, :, 1]
    c = v[..., 1, :, 0]
    d = v[..., 1, :, 1]
    return a, b, c, d


def dwt2(img, scaling: str = "average") -> SubbandSet:
    """Decompose [..., H, W] with even H, W into four half-size subbands."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[-2], img.shape[-1]
    if H % 2 or W % 2:
        raise ValidationError(f"dwt2 needs even extents, got {H}x{W}")
    if scaling not in _SCALES:
        raise ValidationError(f"unknown scaling {scaling!r}")
    k = _SCALES[scaling]
    a, b, c, d = _blocks(img)
    return SubbandSet(
        LL=(a + b + c + d) / k,
        LH=(a + b - c - d) / k,
        HL=(a - b + c - d) / k,
        HH=(a - b - c + d) / k,
        height=H,
        width=W,
        scaling=scaling,
    )


def idwt2(s: SubbandSet) -> np.ndarray:
    """Exact inverse of dwt2."""
    if not (s.LL.shape == s.LH.shape == s.HL.shape == s.HH.shape):
        raise ShapeError("subband shapes disagree")
    k = _SCALES[s.scaling] / 4.0  # synthesis gain that undoes the analysis
    out = np.empty((*s.LL.shape[:-2], s.height, s.width), dtype=np.float64)
    v = out.reshape(*s.LL.shape[:-2], s.height // 2, 2, s.width // 2, 2)
    v[..., 0, :, 0] = (s.LL + s.LH + s.HL + s.HH) * k
    v[..., 0, :, 1] = (s.LL + s.LH - s.HL - s.HH) * k
    v[..., 1, :, 0] = (s.LL - s.LH + s.HL - s.HH) * k
    v[..., 1, :, 1] = (s.LL - s.LH - s.HL + s.HH) * k
    return out


def ll(img) -> Tensor:
    """Differentiable low-pass band: mean of each 2x2 block of [..., H, W]."""
    img = as_tensor(img)
    H, W = img.shape[-2], img.shape[-1]
    if H % 2 or W % 2:
        raise ValidationError(f"ll needs even extents, got {H}x{W}")
    a, b, c, d = _blocks(img.data)
    out = (a + b + c + d) / 4.0

    def vjp(g):
        return (g.repeat(2, axis=-2).repeat(2, axis=-1) / 4.0,)

    return custom_op((img,), out, vjp)
