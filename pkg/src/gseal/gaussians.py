"""Gaussian cloud data model and the generator's 14-channel tensor form.

A cloud is stored structure-of-arrays so the renderer can work on whole
arrays; ``Gaussian`` is the per-element view. Quaternions are w-x-y-z
throughout the package.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from gseal.errors import FormatError, ShapeError, ValidationError
from gseal.gradcore.tensor import Tensor, as_tensor, custom_op, sigmoid, tanh

__all__ = [
    "Gaussian",
    "GaussianCloud",
    "SplatTensor",
    "ActivationSpec",
    "quat_to_rotmat",
    "covariance",
    "normalize_quat",
    "activate_splat",
    "splat_to_cloud",
    "cloud_to_splat",
    "prune",
    "save_cloud",
    "load_cloud",
]

SPLAT_CHANNELS = 14  # 3 pos + 1 opacity + 3 scale + 4 quat + 3 rgb


@dataclass
class Gaussian:
    """One splat: position, rotation (wxyz), scale, opacity, color."""

    mu: np.ndarray
    q: np.ndarray
    s: np.ndarray
    a: float
    c: np.ndarray

    def validate(self) -> None:
        if abs(np.linalg.norm(self.q) - 1.0) > 1e-6:
            raise ValidationError(f"quaternion norm {np.linalg.norm(self.q)} != 1")
        if not np.all(self.s > 0):
            raise ValidationError("scale must be strictly positive")
        if not 0.0 <= self.a <= 1.0:
            raise ValidationError(f"opacity {self.a} outside [0,1]")
        if not (np.all(self.c >= 0) and np.all(self.c <= 1)):
            raise ValidationError("color outside [0,1]")


class GaussianCloud:
    """Ordered collection of Gaussians, stored as parallel arrays."""

    def __init__(self, mu, q, s, a, c):
        self.mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
        self.q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        self.s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        self.a = np.atleast_1d(np.asarray(a, dtype=np.float64))
        self.c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        n = self.mu.shape[0]
        if (self.mu.shape != (n, 3) or self.q.shape != (n, 4)
                or self.s.shape != (n, 3) or self.a.shape != (n,)
                or self.c.shape != (n, 3)):
            raise ShapeError("cloud arrays disagree on count or width")

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.mu[i].copy(), self.q[i].copy(), self.s[i].copy(),
                        float(self.a[i]), self.c[i].copy())

    def __iter__(self):
        return (self[i] for i in range(self.count))

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gs = list(gaussians)
        if not gs:
            raise ValidationError("cloud needs at least one Gaussian")
        return cls(
            np.stack([g.mu for g in gs]),
            np.stack([g.q for g in gs]),
            np.stack([g.s for g in gs]),
            np.array([g.a for g in gs]),
            np.stack([g.c for g in gs]),
        )

    def validate(self) -> None:
        if self.count == 0:
            raise ValidationError("empty cloud")
        norms = np.linalg.norm(self.q, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValidationError("non-unit quaternion in cloud")
        if not np.all(self.s > 0):
            raise ValidationError("non-positive scale in cloud")
        if self.a.min() < 0 or self.a.max() > 1:
            raise ValidationError("opacity outside [0,1]")
        if self.c.min() < 0 or self.c.max() > 1:
            raise ValidationError("color outside [0,1]")

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.mu.copy(), self.q.copy(), self.s.copy(),
                             self.a.copy(), self.c.copy())


@dataclass
class SplatTensor:
    """Raw (pre-activation) 14-channel square grid emitted by the generator."""

    tensor: np.ndarray
    splat_size: int = field(init=False)

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.ndim != 3 or self.tensor.shape[0] != SPLAT_CHANNELS:
            raise ShapeError(f"splat tensor must be [14,S,S], got {self.tensor.shape}")
        if self.tensor.shape[1] != self.tensor.shape[2]:
            raise ShapeError("splat tensor spatial grid must be square")
        self.splat_size = self.tensor.shape[1]


@dataclass(frozen=True)
class ActivationSpec:
    """How raw splat channels map to Gaussian parameters."""

    pos_range: float = 1.0
    s_min: float = 0.005
    s_max: float = 0.3
    opacity_map: str = "sigmoid"
    rotation_rule: str = "normalize"
    color_map: str = "sigmoid"

    def __post_init__(self):
        if self.s_min <= 0 or self.s_max <= self.s_min:
            raise ValidationError(f"need 0 < s_min < s_max, got {self.s_min}, {self.s_max}")
        if self.opacity_map != "sigmoid" or self.color_map != "sigmoid":
            raise ValidationError("only sigmoid opacity/color maps are supported")
        if self.rotation_rule != "normalize":
            raise ValidationError("only quaternion normalization is supported")


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix for unit quaternion(s), wxyz order. (4,) or (N,4)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qq = q[None] if single else q
    norms = np.linalg.norm(qq, axis=1)
    if norms.min() < 1e-8:
        raise ValidationError("near-zero quaternion has no orientation")
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValidationError("quaternion not unit length")
    w, x, y, z = qq[:, 0], qq[:, 1], qq[:, 2], qq[:, 3]
    R = np.empty((qq.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def covariance(q, s) -> np.ndarray:
    """3x3 world covariance R diag(s)^T diag(s) R^T. (4,),(3,) or batched."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(s > 0):
        raise ValidationError("scale must be strictly positive")
    R = quat_to_rotmat(q)
    if R.ndim == 2:
        return R @ np.diag(s * s) @ R.T
    return np.einsum("nij,nj,nkj->nik", R, s * s, R)


def normalize_quat(q_raw) -> Tensor:
    """Row-normalize raw 4-vectors; rows with norm < 1e-8 become identity.

    Differentiable: fallback rows get zero gradient.
    """
    q_raw = as_tensor(q_raw)
    raw = q_raw.data
    single = raw.ndim == 1
    rr = raw[None] if single else raw
    norms = np.linalg.norm(rr, axis=1, keepdims=True)
    safe = norms[:, 0] >= 1e-8
    out = np.zeros_like(rr)
    out[:, 0] = 1.0  # identity quaternion fallback
    if safe.any():
        out[safe] = rr[safe] / norms[safe]
    outc = out.copy()

    def vjp(g):
        gg = g[None] if single else g
        gq = np.zeros_like(rr)
        if safe.any():
            # d(v/|v|) = (g - out (out.g)) / |v|
            dot = (gg[safe] * outc[safe]).sum(axis=1, keepdims=True)
            gq[safe] = (gg[safe] - outc[safe] * dot) / norms[safe]
        return (gq[0] if single else gq,)

    return custom_op((q_raw,), out[0] if single else out, vjp)


def activate_splat(raw, spec: ActivationSpec):
    """Differentiable raw [14,S,S] -> (mu [N,3], a [N], s [N,3], q [N,4], c [N,3]).

    Row-major spatial unrolling, N = S*S. Accepts a gradcore Tensor or array.
    """
    raw = as_tensor(raw)
    if raw.ndim != 3 or raw.shape[0] != SPLAT_CHANNELS:
        raise ShapeError(f"expected [14,S,S], got {raw.shape}")
    S = raw.shape[1]
    flat = raw.reshape(SPLAT_CHANNELS, S * S)
    mu = tanh(flat[0:3]) * spec.pos_range
    a = sigmoid(flat[3])
    s = sigmoid(flat[4:7]) * (spec.s_max - spec.s_min) + spec.s_min
    q = normalize_quat(flat[7:11].transpose())
    c = sigmoid(flat[11:14])
    return mu.transpose(), a, s.transpose(), q, c.transpose()


def splat_to_cloud(t: SplatTensor, spec: ActivationSpec) -> GaussianCloud:
    """Activate a raw splat tensor into an explicit cloud."""
    mu, a, s, q, c = activate_splat(t.tensor, spec)
    return GaussianCloud(mu.data, q.data, s.data, a.data, c.data)


def _logit(p: np.ndarray, what: str) -> np.ndarray:
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValidationError(f"{what} must lie strictly inside (0,1) to invert")
    return np.log(p) - np.log1p(-p)


def cloud_to_splat(cloud: GaussianCloud, spec: ActivationSpec) -> SplatTensor:
    """Invert the activations; the cloud count must be a perfect square."""
    n = cloud.count
    S = int(round(np.sqrt(n)))
    if S * S != n:
        raise ShapeError(f"cloud count {n} is not a square grid")
    u = cloud.mu / spec.pos_range
    if np.any(np.abs(u) >= 1):
        raise ValidationError("position at or beyond pos_range cannot invert tanh")
    raw = np.empty((SPLAT_CHANNELS, n))
    raw[0:3] = np.arctanh(u).T
    raw[3] = _logit(cloud.a, "opacity")
    raw[4:7] = _logit((cloud.s - spec.s_min) / (spec.s_max - spec.s_min), "scale").T
    raw[7:11] = cloud.q.T  # already unit; normalization is idempotent
    raw[11:14] = _logit(cloud.c, "color").T
    return SplatTensor(raw.reshape(SPLAT_CHANNELS, S, S))


def prune(cloud: GaussianCloud, ratio: float, strategy: str = "lowest_opacity",
          seed: int | None = None) -> GaussianCloud:
    """Drop floor(count*ratio) Gaussians; survivor order is preserved."""
    if not 0.0 <= ratio < 1.0:
        raise ValidationError(f"prune ratio {ratio} outside [0,1)")
    k = int(np.floor(cloud.count * ratio))
    if cloud.count - k < 1:
        raise ValidationError("prune would leave an empty cloud")
    if k == 0:
        return cloud.copy()
    if strategy == "lowest_opacity":
        drop = np.argsort(cloud.a, kind="stable")[:k]
    elif strategy == "random":
        rng = np.random.default_rng(seed)
        drop = rng.choice(cloud.count, size=k, replace=False)
    else:
        raise ValidationError(f"unknown prune strategy {strategy!r}")
    keep = np.setdiff1d(np.arange(cloud.count), drop, assume_unique=False)
    return GaussianCloud(cloud.mu[keep], cloud.q[keep], cloud.s[keep],
                         cloud.a[keep], cloud.c[keep])


# ------------------------------------------------------------------ file form

CLOUD_MAGIC = b"GSEAL1"


def save_cloud(path, cloud: GaussianCloud) -> None:
    """Write activated values: magic, u32 count, 14 float32 LE per Gaussian."""
    rows = np.concatenate(
        [cloud.mu, cloud.a[:, None], cloud.s, cloud.q, cloud.c], axis=1
    ).astype("<f4")
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<I", cloud.count))
        f.write(rows.tobytes())


def load_cloud(path) -> GaussianCloud:
    with open(path, "rb") as f:
        if f.read(len(CLOUD_MAGIC)) != CLOUD_MAGIC:
            raise FormatError(f"{path}: not a GSEAL1 splat file")
        head = f.read(4)
        if len(head) != 4:
            raise FormatError("splat file truncated")
        (n,) = struct.unpack("<I", head)
        if n == 0:
            raise FormatError("splat file holds no Gaussians")
        raw = f.read(4 * SPLAT_CHANNELS * n)
        if len(raw) != 4 * SPLAT_CHANNELS * n:
            raise FormatError("splat file truncated")
        if f.read(1):
            raise FormatError("trailing bytes after splat records")
    rows = np.frombuffer(raw, dtype="<f4").reshape(n, SPLAT_CHANNELS).astype(np.float64)
    return GaussianCloud(rows[:, 0:3], rows[:, 7:11], rows[:, 4:7], rows[:, 3], rows[:, 11:14])
