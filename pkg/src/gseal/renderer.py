"""Differentiable splatting of Gaussian clouds to images.

Forward: world -> camera -> EWA screen-space covariance -> tiled
front-to-back alpha compositing over a white background. Backward is
hand-derived and vectorized per tile; gradients reach position, rotation,
scale, opacity and color of every contributing Gaussian.

``render_reference`` is the correctness oracle: same math, no tiling,
no cutoffs, a plain loop over all Gaussians.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from gseal.errors import FormatError, ShapeError, ValidationError
from gseal.gaussians import Gaussian, GaussianCloud, covariance, quat_to_rotmat
from gseal.gradcore.tensor import Tensor, as_tensor, custom_op

__all__ = [
    "Camera",
    "Image",
    "Projected2DGaussian",
    "RenderConfig",
    "project",
    "pixel_weight",
    "composite",
    "render",
    "render_tensor",
    "render_reference",
    "save_image_png",
    "load_image_png",
    "save_image_raw",
    "load_image_raw",
]

COV_REG = 0.3       # screen-space covariance floor, pixel units
CUTOFF_D2 = 18.0    # squared Mahalanobis distance beyond which sigma is 0
T_STOP = 1e-4       # transmittance below which compositing stops
SIGMA_MAX = 1.0 - 1e-6  # keeps 1/(1-sigma) finite in the backward pass
TILE = 16
# screen radius covers the whole live ellipse (d2 <= CUTOFF_D2, ~4.24 sigma);
# a tighter 3-sigma radius would drop visible d2 in (9,18] mass at tile seams
RADIUS_SIGMAS = float(np.sqrt(CUTOFF_D2))


@dataclass
class Camera:
    """Pinhole camera; view maps world to camera space, +z forward."""

    view: np.ndarray
    f: float
    width: int
    height: int
    cx: float | None = None
    cy: float | None = None
    near: float = 0.05

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=np.float64)
        if self.view.shape != (4, 4):
            raise ShapeError(f"view must be 4x4, got {self.view.shape}")
        R = self.view[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
            raise ValidationError("view rotation block is not orthonormal")
        if self.f <= 0:
            raise ValidationError("focal length must be positive")
        if self.near <= 0:
            raise ValidationError("near plane must be positive")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0


@dataclass
class Image:
    """Rendered RGB values in [0,1], channels-first."""

    pixels: np.ndarray
    height: int = field(init=False)
    width: int = field(init=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"image must be [3,H,W], got {self.pixels.shape}")
        self.height, self.width = self.pixels.shape[1:]


@dataclass
class Projected2DGaussian:
    center: np.ndarray      # pixels
    cov: np.ndarray         # 2x2, regularized
    depth: float            # camera-space z
    opacity: float
    color: np.ndarray
    radius: float           # RADIUS_SIGMAS * major-axis sigma, pixels


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = TILE
    background: tuple = (1.0, 1.0, 1.0)
    sigma_cutoff: bool = True
    early_stop: bool = True
    radius_cull: bool = True
    dtype: str = "float64"  # "float32" trades oracle-grade precision for speed

    @classmethod
    def exact(cls) -> "RenderConfig":
        """All cutoffs off; the tiled renderer then matches the reference."""
        return cls(sigma_cutoff=False, early_stop=False, radius_cull=False)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


# ------------------------------------------------------------- scalar spec API


def project(g: Gaussian, cam: Camera):
    """Project one Gaussian; returns None when culled."""
    pc = cam.view[:3, :3] @ g.mu + cam.view[:3, 3]
    x, y, z = pc
    if z <= cam.near:
        return None
    Sigma = covariance(g.q, g.s)
    W3 = cam.view[:3, :3]
    Sc = W3 @ Sigma @ W3.T
    f = cam.f
    J = np.array([[f / z, 0.0, -f * x / z**2],
                  [0.0, f / z, -f * y / z**2]])
    Sp = J @ Sc @ J.T + COV_REG * np.eye(2)
    mux = f * x / z + cam.cx
    muy = f * y / z + cam.cy
    lam = 0.5 * (Sp[0, 0] + Sp[1, 1]) + np.sqrt(
        0.25 * (Sp[0, 0] - Sp[1, 1]) ** 2 + Sp[0, 1] ** 2
    )
    r = RADIUS_SIGMAS * np.sqrt(lam)
    if (mux + r < 0 or mux - r > cam.width or muy + r < 0 or muy - r > cam.height):
        return None
    return Projected2DGaussian(np.array([mux, muy]), Sp, float(z),
                               float(g.a), g.c.copy(), float(r))


def pixel_weight(p, pg: Projected2DGaussian) -> float:
    """Opacity-scaled Gaussian falloff at pixel coordinates p."""
    d = np.asarray(p, dtype=np.float64) - pg.center
    d2 = d @ np.linalg.solve(pg.cov, d)
    return float(pg.opacity * np.exp(-0.5 * d2))


def composite(p, pgs, background=(1.0, 1.0, 1.0), return_transmittance: bool = False):
    """Front-to-back compositing at one pixel; pgs sorted front first."""
    bg = np.asarray(background, dtype=np.float64)
    out = np.zeros(3)
    T = 1.0
    for pg in pgs:
        if T < T_STOP:
            break
        sig = min(pixel_weight(p, pg), SIGMA_MAX)
        out += pg.color * sig * T
        T *= 1.0 - sig
    out += T * bg
    return (out, T) if return_transmittance else out


# ------------------------------------------------------- vectorized projection


def _project_arrays(mu, q, s, cam: Camera, cfg: RenderConfig):
    """Batch EWA projection; returns everything backward will need."""
    N = mu.shape[0]
    W3 = cam.view[:3, :3]
    pc = mu @ W3.T + cam.view[:3, 3]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    valid = z > cam.near
    zs = np.where(valid, z, 1.0)

    Rm = _quat_mats(q)
    Sigma = np.einsum("nij,nj,nkj->nik", Rm, s * s, Rm)
    Sc = np.einsum("ij,njk,lk->nil", W3, Sigma, W3)

    f = cam.f
    J = np.zeros((N, 2, 3))
    J[:, 0, 0] = f / zs
    J[:, 0, 2] = -f * x / zs**2
    J[:, 1, 1] = f / zs
    J[:, 1, 2] = -f * y / zs**2
    Sp = np.einsum("nia,nab,njb->nij", J, Sc, J)
    Sp[:, 0, 0] += COV_REG
    Sp[:, 1, 1] += COV_REG

    det = Sp[:, 0, 0] * Sp[:, 1, 1] - Sp[:, 0, 1] ** 2
    M = np.empty_like(Sp)  # closed-form 2x2 inverse
    M[:, 0, 0] = Sp[:, 1, 1] / det
    M[:, 1, 1] = Sp[:, 0, 0] / det
    M[:, 0, 1] = M[:, 1, 0] = -Sp[:, 0, 1] / det

    mux = f * x / zs + cam.cx
    muy = f * y / zs + cam.cy
    half = 0.5 * (Sp[:, 0, 0] - Sp[:, 1, 1])
    lam = 0.5 * (Sp[:, 0, 0] + Sp[:, 1, 1]) + np.sqrt(half**2 + Sp[:, 0, 1] ** 2)
    radius = RADIUS_SIGMAS * np.sqrt(np.maximum(lam, 0.0))

    if cfg.radius_cull:
        on_screen = ((mux + radius > 0) & (mux - radius < cam.width)
                     & (muy + radius > 0) & (muy - radius < cam.height))
        valid = valid & on_screen
    return {
        "pc": pc, "zs": zs, "valid": valid, "Rm": Rm, "Sigma": Sigma,
        "Sc": Sc, "J": J, "Sp": Sp, "M": M, "mux": mux, "muy": muy,
        "radius": radius, "W3": W3, "f": f,
    }


def _quat_mats(q: np.ndarray) -> np.ndarray:
    """Rotation matrices without the unit-norm check (inputs pre-normalized)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _tile_lists(pr, cam: Camera, cfg: RenderConfig):
    """Depth-sorted Gaussian index list per tile."""
    order = np.argsort(pr["pc"][:, 2], kind="stable")
    order = order[pr["valid"][order]]
    ts = cfg.tile_size
    nty = (cam.height + ts - 1) // ts
    ntx = (cam.width + ts - 1) // ts
    tiles = []
    mux, muy, rad = pr["mux"], pr["muy"], pr["radius"]
    for ty in range(nty):
        y0, y1 = ty * ts, min((ty + 1) * ts, cam.height)
        for tx in range(ntx):
            x0, x1 = tx * ts, min((tx + 1) * ts, cam.width)
            if cfg.radius_cull:
                sel = order[
                    (mux[order] + rad[order] > x0) & (mux[order] - rad[order] < x1)
                    & (muy[order] + rad[order] > y0) & (muy[order] - rad[order] < y1)
                ]
            else:
                sel = order
            tiles.append((y0, y1, x0, x1, sel))
    return tiles


def _pixel_deltas(idx, y0, y1, x0, x1, pr, dt):
    xs = (np.arange(x0, x1, dtype=dt) + dt(0.5))[None, :].repeat(y1 - y0, 0).ravel()
    ys = (np.arange(y0, y1, dtype=dt) + dt(0.5))[:, None].repeat(x1 - x0, 1).ravel()
    dx = xs[None, :] - pr["mux"][idx, None]
    dy = ys[None, :] - pr["muy"][idx, None]
    return dx, dy


def _tile_forward(idx, y0, y1, x0, x1, pr, a, c, cfg, dt):
    """Composite one tile; returns (cached state for backward, rgb)."""
    dx, dy = _pixel_deltas(idx, y0, y1, x0, x1, pr, dt)
    M = pr["M"]
    d2 = M[idx, 0, 0, None] * dx * dx
    d2 += (2.0 * M[idx, 0, 1, None]) * dx * dy
    d2 += M[idx, 1, 1, None] * dy * dy
    e = np.exp(d2 * dt(-0.5))
    sig = a[idx, None] * e
    if cfg.sigma_cutoff:
        cut = d2 <= CUTOFF_D2
        sig *= cut
    else:
        cut = None
    np.minimum(sig, dt(SIGMA_MAX), out=sig)
    C = np.cumprod(1.0 - sig, axis=0)
    T = np.empty_like(C)
    T[0] = 1.0
    T[1:] = C[:-1]
    if cfg.early_stop:
        stop = T >= T_STOP
        w = sig * T
        w *= stop
        T_end = np.prod(np.where(stop, 1.0 - sig, 1.0), axis=0)
    else:
        w = sig * T
        T_end = C[-1]
    rgb = c[idx].T.astype(dt, copy=False) @ w
    rgb += np.asarray(cfg.background, dtype=dt)[:, None] * T_end[None, :]
    return {"e": e, "sig": sig, "T": T, "T_end": T_end, "w": w, "cut": cut}, rgb


def render_tensor(mu, q, s, a, c, cam: Camera, cfg: RenderConfig | None = None) -> Tensor:
    """Differentiable render to an unclamped [3,H,W] tensor.

    mu [N,3], q [N,4] unit, s [N,3] > 0, a [N] in [0,1], c [N,3] in [0,1].
    """
    cfg = cfg or RenderConfig()
    dt = cfg.np_dtype
    mu, q, s, a, c = (as_tensor(t) for t in (mu, q, s, a, c))
    if mu.ndim != 2 or mu.shape[1] != 3 or mu.shape[0] == 0:
        raise ValidationError(f"need a non-empty [N,3] position array, got {mu.shape}")
    mud, qd, sd = mu.data, q.data, s.data
    ad, cd = a.data.astype(dt, copy=False), c.data.astype(dt, copy=False)
    N = mud.shape[0]
    H, W = cam.height, cam.width

    pr = _project_arrays(mud, qd, sd, cam, cfg)
    if dt is not np.float64:
        for k in ("M", "mux", "muy"):
            pr[k] = pr[k].astype(dt)
    tiles = _tile_lists(pr, cam, cfg)
    img = np.empty((3, H, W))
    states = []
    for (y0, y1, x0, x1, idx) in tiles:
        if idx.size == 0:
            img[:, y0:y1, x0:x1] = np.asarray(cfg.background)[:, None, None]
            states.append(None)
            continue
        st, rgb = _tile_forward(idx, y0, y1, x0, x1, pr, ad, cd, cfg, dt)
        img[:, y0:y1, x0:x1] = rgb.reshape(3, y1 - y0, x1 - x0)
        states.append(st)

    def vjp(g):
        dmux = np.zeros(N, dtype=dt)
        dmuy = np.zeros(N, dtype=dt)
        dM = np.zeros((N, 2, 2), dtype=dt)
        da = np.zeros(N, dtype=dt)
        dc = np.zeros((N, 3), dtype=dt)
        bg = np.asarray(cfg.background, dtype=dt)
        for (y0, y1, x0, x1, idx), st in zip(tiles, states):
            if st is None:
                continue
            gt = g[:, y0:y1, x0:x1].reshape(3, -1).astype(dt, copy=False)
            w, sig, T, T_end, e = st["w"], st["sig"], st["T"], st["T_end"], st["e"]
            dc[idx] += w @ gt.T
            cg = cd[idx] @ gt                       # [K,P]
            A = cg * w
            suff = np.cumsum(A[::-1], axis=0)[::-1]
            suff -= A                               # strictly-after sums
            suff += (bg @ gt)[None, :] * T_end[None, :]
            dsig = cg * T
            dsig -= suff / (1.0 - sig)
            active = sig < dt(SIGMA_MAX)            # clamp gradient gate
            if st["cut"] is not None:
                active &= st["cut"]
            if cfg.early_stop:
                active &= T >= T_STOP
            dsig *= active
            dd2 = dsig * e
            da[idx] += dd2.sum(axis=1)
            dd2 *= ad[idx, None] * dt(-0.5)
            dx, dy = _pixel_deltas(idx, y0, y1, x0, x1, pr, dt)
            M = pr["M"]
            dd22 = dd2 + dd2
            gx = M[idx, 0, 0, None] * dx
            gx += M[idx, 0, 1, None] * dy
            gx *= dd22
            gy = M[idx, 0, 1, None] * dx
            gy += M[idx, 1, 1, None] * dy
            gy *= dd22
            dmux[idx] -= gx.sum(axis=1)
            dmuy[idx] -= gy.sum(axis=1)
            t = dd2 * dx
            dM[idx, 0, 0] += (t * dx).sum(axis=1)
            dxy = (t * dy).sum(axis=1)
            dM[idx, 0, 1] += dxy
            dM[idx, 1, 0] += dxy
            t = dd2 * dy
            dM[idx, 1, 1] += (t * dy).sum(axis=1)
        if dt is not np.float64:
            dmux = dmux.astype(np.float64)
            dmuy = dmuy.astype(np.float64)
            dM = dM.astype(np.float64)
            da = da.astype(np.float64)
            dc = dc.astype(np.float64)

        Mfull = pr["M"]
        dSp = -np.einsum("nij,njk,nkl->nil", Mfull, dM, Mfull)
        J, Sc, W3, f = pr["J"], pr["Sc"], pr["W3"], pr["f"]
        dSc = np.einsum("nia,nij,njb->nab", J, dSp, J)
        dJ = 2.0 * np.einsum("nij,njb,nba->nia", dSp, J, Sc)
        dSigma = np.einsum("ia,nij,jb->nab", W3, dSc, W3)

        Rm, sd2 = pr["Rm"], sd
        dR = 2.0 * np.einsum("nij,njk,nk->nik", dSigma, Rm, sd2 * sd2)
        ds = 2.0 * sd2 * np.einsum("nji,njk,nki->ni", Rm, dSigma, Rm)
        dq = _quat_backward(qd, dR)

        x, y = pr["pc"][:, 0], pr["pc"][:, 1]
        zs = pr["zs"]
        dxc = dmux * (f / zs) + dJ[:, 0, 2] * (-f / zs**2)
        dyc = dmuy * (f / zs) + dJ[:, 1, 2] * (-f / zs**2)
        dzc = (dmux * (-f * x / zs**2) + dmuy * (-f * y / zs**2)
               + (dJ[:, 0, 0] + dJ[:, 1, 1]) * (-f / zs**2)
               + dJ[:, 0, 2] * (2 * f * x / zs**3)
               + dJ[:, 1, 2] * (2 * f * y / zs**3))
        dmu_ = np.stack([dxc, dyc, dzc], axis=1) @ W3

        live = pr["valid"][:, None]
        return (dmu_ * live, dq * live, ds * live,
                da * pr["valid"], dc * live)

    return custom_op((mu, q, s, a, c), img, vjp)


def _quat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain dL/dR into dL/dq for the wxyz quadratic matrix formula."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)

    def acc(rows):
        P = np.empty_like(dR)
        for i in range(3):
            for j in range(3):
                P[:, i, j] = rows[i][j]
        return (dR * P).sum(axis=(1, 2))

    dw = acc([(zero, -2 * z, 2 * y), (2 * z, zero, -2 * x), (-2 * y, 2 * x, zero)])
    dx = acc([(zero, 2 * y, 2 * z), (2 * y, -4 * x, -2 * w), (2 * z, 2 * w, -4 * x)])
    dy = acc([(-4 * y, 2 * x, 2 * w), (2 * x, zero, 2 * z), (-2 * w, 2 * z, -4 * y)])
    dz = acc([(-4 * z, -2 * w, 2 * x), (2 * w, -4 * z, 2 * y), (2 * x, 2 * y, zero)])
    return np.stack([dw, dx, dy, dz], axis=1)


def render(cloud: GaussianCloud, cam: Camera, cfg: RenderConfig | None = None) -> Image:
    """Non-differentiable convenience wrapper returning a clamped Image."""
    if cloud.count == 0:
        raise ValidationError("cannot render an empty cloud")
    cloud.validate()
    out = render_tensor(cloud.mu, cloud.q, cloud.s, cloud.a, cloud.c, cam, cfg)
    return Image(np.clip(out.data, 0.0, 1.0))


def render_reference(cloud: GaussianCloud, cam: Camera,
                     cfg: RenderConfig | None = None) -> Image:
    """Oracle renderer: every Gaussian at every pixel, no shortcuts."""
    if cloud.count == 0:
        raise ValidationError("cannot render an empty cloud")
    cfg = cfg or RenderConfig()
    H, W = cam.height, cam.width
    bg = np.asarray(cfg.background)
    W3 = cam.view[:3, :3]

    entries = []
    for i in range(cloud.count):
        pc = W3 @ cloud.mu[i] + cam.view[:3, 3]
        if pc[2] <= cam.near:
            continue
        Sigma = covariance(cloud.q[i], cloud.s[i])
        x, y, z = pc
        f = cam.f
        J = np.array([[f / z, 0, -f * x / z**2], [0, f / z, -f * y / z**2]])
        Sp = J @ (W3 @ Sigma @ W3.T) @ J.T + COV_REG * np.eye(2)
        center = np.array([f * x / z + cam.cx, f * y / z + cam.cy])
        entries.append((z, i, center, np.linalg.inv(Sp)))
    entries.sort(key=lambda t: (t[0], t[1]))

    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    PX, PY = np.meshgrid(xs, ys)
    img = np.zeros((3, H, W))
    T = np.ones((H, W))
    for z, i, center, Minv in entries:
        dx = PX - center[0]
        dy = PY - center[1]
        d2 = Minv[0, 0] * dx * dx + 2 * Minv[0, 1] * dx * dy + Minv[1, 1] * dy * dy
        sig = np.minimum(cloud.a[i] * np.exp(-0.5 * d2), SIGMA_MAX)
        img += cloud.c[i][:, None, None] * (sig * T)[None, :, :]
        T = T * (1.0 - sig)
    img += bg[:, None, None] * T[None, :, :]
    return Image(np.clip(img, 0.0, 1.0))


# -------------------------------------------------------------------- file io

IMG_MAGIC = b"GSIMG1"


def save_image_png(path, img: Image) -> None:
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image_png(path) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return Image(arr.transpose(2, 0, 1))


def save_image_raw(path, img: Image) -> None:
    """Lossless dump: magic, u32 H, u32 W, 3*H*W float32 LE."""
    with open(path, "wb") as f:
        f.write(IMG_MAGIC)
        f.write(struct.pack("<II", img.height, img.width))
        f.write(img.pixels.astype("<f4").tobytes())


def load_image_raw(path) -> Image:
    with open(path, "rb") as f:
        if f.read(len(IMG_MAGIC)) != IMG_MAGIC:
            raise FormatError(f"{path}: not a GSIMG1 image file")
        head = f.read(8)
        if len(head) != 8:
            raise FormatError("image file truncated")
        H, W = struct.unpack("<II", head)
        raw = f.read(12 * H * W)
        if len(raw) != 12 * H * W:
            raise FormatError("image file truncated")
    return Image(np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(3, H, W))
