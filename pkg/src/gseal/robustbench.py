"""Attack suite and quality metrics for watermark robustness runs.

3-D attacks act on the Gaussian cloud before rendering; 2-D attacks act
on rendered views before decoding. Everything is deterministic given the
attack seed, so benchmark tables reproduce byte-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gseal.errors import ShapeError, ValidationError
from gseal.gaussians import prune
from gseal.renderer import RenderConfig, render

__all__ = [
    "AttackSpec",
    "MetricReport",
    "attack_noise",
    "attack_crop",
    "attack_rotate",
    "attack_brightness",
    "attack_blur",
    "attack_jpeg",
    "apply_image_attack",
    "psnr",
    "ssim",
    "bit_accuracy",
    "run_robustness",
    "report_csv",
    "report_text",
]

PSNR_CAP = 99.0
BACKGROUND = 1.0  # white, matching the render default

IMAGE_ATTACKS = ("noise", "crop", "rotate", "brightness", "jpeg", "blur")


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind != "prune" and self.kind not in IMAGE_ATTACKS:
            raise ValidationError(f"unknown attack kind {self.kind!r}")

    @property
    def label(self) -> str:
        return f"{self.kind}({self.param:g})"


@dataclass(frozen=True)
class MetricReport:
    attack: str
    param: float
    psnr: float
    ssim: float
    bit_accuracy: float


def _check_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected [3,H,W] image, got {arr.shape}")
    return arr


# -------------------------------------------------------------- image attacks


def attack_noise(img, sigma: float = 0.1, seed: int = 0) -> np.ndarray:
    arr = _check_image(img)
    if sigma < 0:
        raise ValidationError("noise sigma must be non-negative")
    noise = np.random.default_rng(seed).normal(0.0, 1.0, arr.shape)
    return np.clip(arr + sigma * noise, 0.0, 1.0)


def attack_crop(img, keep: float = 0.40) -> np.ndarray:
    arr = _check_image(img)
    if not 0.0 < keep <= 1.0:
        raise ValidationError(f"crop keep fraction {keep} outside (0,1]")
    H, W = arr.shape[1:]
    side = np.sqrt(keep)
    kh, kw = int(round(H * side)), int(round(W * side))
    y0, x0 = (H - kh) // 2, (W - kw) // 2
    out = np.full_like(arr, BACKGROUND)
    out[:, y0:y0 + kh, x0:x0 + kw] = arr[:, y0:y0 + kh, x0:x0 + kw]
    return out


def attack_rotate(img, degrees: float = 60.0) -> np.ndarray:
    """Rotate about the image center, bilinear sampling, background fill."""
    arr = _check_image(img)
    H, W = arr.shape[1:]
    th = np.deg2rad(degrees)
    cos, sin = np.cos(th), np.sin(th)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    # inverse map: where does each output pixel come from
    sx = cos * xx + sin * yy + cx
    sy = -sin * xx + cos * yy + cy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    eps = 1e-9  # keep borderline grid points after float roundoff
    valid = (sx >= -eps) & (sx <= W - 1 + eps) & (sy >= -eps) & (sy <= H - 1 + eps)
    x0c = np.clip(x0, 0, W - 1)
    y0c = np.clip(y0, 0, H - 1)
    x1c = np.clip(x0 + 1, 0, W - 1)
    y1c = np.clip(y0 + 1, 0, H - 1)
    out = np.empty_like(arr)
    for ch in range(3):
        p = arr[ch]
        top = p[y0c, x0c] * (1 - fx) + p[y0c, x1c] * fx
        bot = p[y1c, x0c] * (1 - fx) + p[y1c, x1c] * fx
        out[ch] = np.where(valid, top * (1 - fy) + bot * fy, BACKGROUND)
    return out


def attack_brightness(img, factor: float = 2.0) -> np.ndarray:
    arr = _check_image(img)
    if factor <= 0:
        raise ValidationError("brightness factor must be positive")
    return np.clip(arr * factor, 0.0, 1.0)


def attack_blur(img, k: int = 5) -> np.ndarray:
    arr = _check_image(img)
    if k < 1 or k % 2 == 0:
        raise ValidationError(f"blur kernel size must be odd, got {k}")
    sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8
    half = k // 2
    kern = np.exp(-0.5 * (np.arange(k) - half) ** 2 / sigma**2)
    kern /= kern.sum()
    pad = np.pad(arr, ((0, 0), (half, half), (half, half)), mode="edge")
    # separable convolution, edge-replicate boundaries
    tmp = np.zeros((3, arr.shape[1] + 2 * half, arr.shape[2]))
    for i in range(k):
        tmp += kern[i] * pad[:, :, i:i + arr.shape[2]]
    out = np.zeros_like(arr)
    for i in range(k):
        out += kern[i] * tmp[:, i:i + arr.shape[1], :]
    return out


# JPEG Annex-K reference quantization tables
_Q_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)
_Q_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def _dct_matrix() -> np.ndarray:
    k = np.arange(8)
    C = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / 16) * 0.5
    C[0] /= np.sqrt(2.0)
    return C


_DCT = _dct_matrix()


def _quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((base * scale + 50.0) / 100.0), 1.0, 255.0)


def _jpeg_plane(plane: np.ndarray, qtab: np.ndarray) -> np.ndarray:
    H, W = plane.shape
    ph, pw = (-H) % 8, (-W) % 8
    p = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    blocks = p.reshape(p.shape[0] // 8, 8, p.shape[1] // 8, 8).transpose(0, 2, 1, 3)
    coef = np.einsum("ij,bcjk,lk->bcil", _DCT, blocks - 128.0, _DCT)
    coef = np.round(coef / qtab) * qtab
    rec = np.einsum("ji,bcjk,kl->bcil", _DCT, coef, _DCT) + 128.0
    out = rec.transpose(0, 2, 1, 3).reshape(p.shape)
    return out[:H, :W]


def _upsample_triangle(c: np.ndarray, H: int, W: int) -> np.ndarray:
    # 2x chroma upsample with the 3/4-1/4 triangle filter decoders use
    h, w = c.shape
    cp = np.pad(c, 1, mode="edge")
    up = np.empty((2 * h, 2 * w))
    ci = cp[1:-1, 1:-1]
    for di in (0, 1):
        for dj in (0, 1):
            cv = cp[2 * di:2 * di + h, 1:-1]
            ch = cp[1:-1, 2 * dj:2 * dj + w]
            cd = cp[2 * di:2 * di + h, 2 * dj:2 * dj + w]
            up[di::2, dj::2] = (9 * ci + 3 * cv + 3 * ch + cd) / 16.0
    return up[:H, :W]


def attack_jpeg(img, quality: int = 10) -> np.ndarray:
    """Distortion-equivalent JPEG round trip (DCT quantization, 4:2:0)."""
    arr = _check_image(img)
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValidationError(f"jpeg quality {quality} outside [1,100]")
    r, g, b = arr[0] * 255.0, arr[1] * 255.0, arr[2] * 255.0
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0

    H, W = y.shape
    eh, ew = H + H % 2, W + W % 2
    def half(p):
        q = np.pad(p, ((0, eh - H), (0, ew - W)), mode="edge")
        return 0.25 * (q[0::2, 0::2] + q[1::2, 0::2] + q[0::2, 1::2] + q[1::2, 1::2])

    qy = _quant_table(_Q_LUMA, quality)
    qc = _quant_table(_Q_CHROMA, quality)
    y2 = _jpeg_plane(y, qy)
    cb2 = _upsample_triangle(_jpeg_plane(half(cb), qc), H, W)
    cr2 = _upsample_triangle(_jpeg_plane(half(cr), qc), H, W)

    cb2 -= 128.0
    cr2 -= 128.0
    out = np.stack([
        y2 + 1.402 * cr2,
        y2 - 0.344136 * cb2 - 0.714136 * cr2,
        y2 + 1.772 * cb2,
    ])
    return np.clip(out / 255.0, 0.0, 1.0)


def apply_image_attack(spec: AttackSpec, img) -> np.ndarray:
    if spec.kind == "noise":
        return attack_noise(img, spec.param, spec.seed)
    if spec.kind == "crop":
        return attack_crop(img, spec.param)
    if spec.kind == "rotate":
        return attack_rotate(img, spec.param)
    if spec.kind == "brightness":
        return attack_brightness(img, spec.param)
    if spec.kind == "jpeg":
        return attack_jpeg(img, int(spec.param))
    if spec.kind == "blur":
        return attack_blur(img, int(spec.param))
    raise ValidationError(f"{spec.kind!r} is not an image attack")


# -------------------------------------------------------------------- metrics


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _ssim_window() -> np.ndarray:
    g = np.exp(-0.5 * (np.arange(11) - 5) ** 2 / 1.5**2)
    g /= g.sum()
    return np.outer(g, g)


_SSIM_W = _ssim_window()


def _windowed(p: np.ndarray) -> np.ndarray:
    # valid-mode 11x11 weighted means via stride tricks
    from numpy.lib.stride_tricks import sliding_window_view

    wins = sliding_window_view(p, (11, 11))
    return np.einsum("ijkl,kl->ij", wins, _SSIM_W)


def ssim(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < 11 or a.shape[-2] < 11:
        raise ShapeError("ssim needs images at least 11x11")
    K1, K2 = 0.01, 0.03
    C1, C2 = K1**2, K2**2
    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx, my = _windowed(x), _windowed(y)
        mxx, myy, mxy = _windowed(x * x), _windowed(y * y), _windowed(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cxy = mxy - mx * my
        s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx**2 + my**2 + C1) * (vx + vy + C2))
        scores.append(s.mean())
    return float(np.mean(scores))


def bit_accuracy(decoded, truth) -> float:
    decoded, truth = np.asarray(decoded), np.asarray(truth)
    if decoded.shape != truth.shape:
        raise ShapeError(f"bit lengths differ: {decoded.shape} vs {truth.shape}")
    return float((decoded == truth).mean())


# ------------------------------------------------------------------ benchmark


def run_robustness(system, attacks, scenes, render_cfg: RenderConfig | None = None):
    """Attack -> render -> attack -> decode over scenes; one report row each.

    ``system`` supplies watermarked_cloud(scene), clean_cloud(scene),
    decode(views) -> bits, and the truth bits in .message. Order is fixed:
    3-D attacks hit the cloud before rendering, 2-D attacks hit the
    rendered views before decoding.
    """
    cfg = render_cfg or RenderConfig(dtype="float32")
    rows = [_bench_one(system, None, scenes, cfg)]
    for spec in attacks:
        rows.append(_bench_one(system, spec, scenes, cfg))
    return rows


def _bench_one(system, spec, scenes, cfg) -> MetricReport:
    psnrs, ssims, accs = [], [], []
    truth = system.message.bits
    for scene in scenes:
        cloud = system.watermarked_cloud(scene)
        if spec is not None and spec.kind == "prune":
            cloud = prune(cloud, spec.param, seed=spec.seed)
        clean = system.clean_cloud(scene)
        views, refs = [], []
        for cam in scene.eval_cams:
            v = render(cloud, cam, cfg).pixels
            if spec is not None and spec.kind != "prune":
                v = apply_image_attack(spec, v)
            views.append(v)
            refs.append(render(clean, cam, cfg).pixels)
        views = np.stack(views)
        refs = np.stack(refs)
        psnrs.append(psnr(views, refs))
        ssims.append(np.mean([ssim(v, r) for v, r in zip(views, refs)]))
        accs.append(bit_accuracy(system.decode(views), truth))
    return MetricReport(
        attack="none" if spec is None else spec.kind,
        param=0.0 if spec is None else float(spec.param),
        psnr=float(np.mean(psnrs)),
        ssim=float(np.mean(ssims)),
        bit_accuracy=float(np.mean(accs)),
    )


def report_csv(rows) -> str:
    lines = ["attack,param,psnr,ssim,bit_acc"]
    for r in rows:
        lines.append(f"{r.attack},{r.param:g},{r.psnr:.4f},{r.ssim:.4f},{r.bit_accuracy:.4f}")
    return "\n".join(lines) + "\n"


def report_text(rows) -> str:
    head = f"{'attack':<12}{'param':>8}{'psnr':>10}{'ssim':>8}{'bits':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.attack:<12}{r.param:>8g}{r.psnr:>10.2f}"
                     f"{r.ssim:>8.4f}{r.bit_accuracy:>8.4f}")
    return "\n".join(lines) + "\n"
