"""Network building blocks: dense/conv layers, normalization, resampling."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gseal.errors import ShapeError
from gseal.gradcore.tensor import Tensor, as_tensor, custom_op, matmul

__all__ = [
    "linear",
    "conv2d",
    "instance_norm",
    "upsample_nearest2x",
    "global_avg_pool",
    "resize_bilinear",
]


def linear(x, W, b=None) -> Tensor:
    """y = x @ W + b for x [N, Din], W [Din, Dout], b [Dout]."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and W, got {x.shape}, {W.shape}")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: x {x.shape} incompatible with W {W.shape}")
    y = matmul(x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} must be ({W.shape[1]},)")
        y = y + b
    return y


def _conv_forward(x: np.ndarray, K: np.ndarray, stride: int, padding: int):
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = K.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, Cin * kh * kw
    )
    y = cols @ K.reshape(Cout, -1).T
    return y.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2), (Ho, Wo)


def conv2d(x, K, b=None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    x: [Cin, H, W] or [B, Cin, H, W]; K: [Cout, Cin, kh, kw]; b: [Cout].
    """
    x, K = as_tensor(x), as_tensor(K)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or K.ndim != 4:
        raise ShapeError(f"conv2d expects image x and 4-D kernel, got {x.shape}, {K.shape}")
    if xd.shape[1] != K.shape[1]:
        raise ShapeError(f"conv2d: {xd.shape[1]} input channels vs kernel {K.shape[1]}")
    Cout, Cin, kh, kw = K.shape
    yd, (Ho, Wo) = _conv_forward(xd, K.data, stride, padding)
    B = xd.shape[0]

    def vjp(g_out):
        g = g_out[None] if squeeze else g_out
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        # recompute the im2col matrix rather than keeping it alive
        xpad = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            B * Ho * Wo, Cin * kh * kw
        )
        gK = (gmat.T @ cols).reshape(K.shape)
        gcols = gmat @ K.data.reshape(Cout, -1)
        gcols = gcols.reshape(B, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros_like(xpad)
        for ki in range(kh):
            for kj in range(kw):
                gxp[:, :, ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride] += (
                    gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding : padding + xd.shape[2], padding : padding + xd.shape[3]]
        if squeeze:
            gx = gx[0]
        return gx, gK

    out = custom_op((x, K), yd[0] if squeeze else yd, vjp)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Cout,):
            raise ShapeError(f"conv2d: bias {b.shape} must be ({Cout},)")
        out = out + b.reshape(Cout, 1, 1)
    return out


def instance_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes.

    x: [B, C, H, W]; gain/bias: [C]. Deterministic (no running stats).
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects [B,C,H,W], got {x.shape}")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gain.data[None, :, None, None] * xhat + bias.data[None, :, None, None]
    n = xd.shape[2] * xd.shape[3]

    def vjp(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3))
        gbias = g.sum(axis=(0, 2, 3))
        gh = g * gain.data[None, :, None, None]
        m1 = gh.mean(axis=(2, 3), keepdims=True)
        m2 = (gh * xhat).mean(axis=(2, 3), keepdims=True)
        gx = inv * (gh - m1 - xhat * m2) if n > 1 else np.zeros_like(gh)
        return gx, ggain, gbias

    return custom_op((x, gain, bias), out, vjp)


def upsample_nearest2x(x) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling for [B, C, H, W]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x expects [B,C,H,W], got {x.shape}")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def vjp(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return custom_op((x,), out, vjp)


def global_avg_pool(x) -> Tensor:
    """[B, C, H, W] -> [B, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    return x.mean(axis=(2, 3))


def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] bilinear interpolation matrix."""
    W = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        W[i, lo_c] += 1.0 - frac
        W[i, hi_c] += frac
    return W


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [..., H, W] (half-pixel centers, edges clamped)."""
    x = as_tensor(x)
    H, W = x.shape[-2], x.shape[-1]
    if (H, W) == (out_h, out_w):
        return x
    Wr = _resize_weights(H, out_h)
    Wc = _resize_weights(W, out_w)
    out = np.einsum("ij,...jk,lk->...il", Wr, x.data, Wc, optimize=True)

    def vjp(g):
        return (np.einsum("ij,...ik,kl->...jl", Wr, g, Wc, optimize=True),)

    return custom_op((x,), out, vjp)
