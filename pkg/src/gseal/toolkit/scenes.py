"""Synthetic multi-view scenes: primitive surfaces, camera rigs, dataset files.

Scene geometry is sampled on a row-major parameter grid so the flattened
cloud stays spatially coherent — the generator regresses it as an image.
All sampling is seeded; a dataset re-synthesized with the same seeds is
byte-identical in its raw dumps.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from gseal.errors import FormatError, ValidationError
from gseal.gaussians import GaussianCloud, load_cloud, save_cloud
from gseal.renderer import Camera, Image, load_image_raw, render_reference, save_image_png, save_image_raw

__all__ = [
    "PRIMITIVES",
    "SceneSpec",
    "CameraRig",
    "SceneSample",
    "look_at",
    "input_cameras",
    "synth_scene",
    "synth_dataset",
    "save_rig",
    "load_rig",
    "save_dataset",
    "load_dataset",
    "foreground_fraction",
]

PRIMITIVES = ("sphere-shell", "box", "two-blob")

INPUT_VIEWS = 4
INPUT_ELEVATION = 0.3  # radians; the canonical 4-view stack has no jitter


@dataclass(frozen=True)
class SceneSpec:
    primitive: str
    budget: int = 1024
    palette_seed: int = 0
    pose_seed: int = 0

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValidationError(f"unknown primitive {self.primitive!r}")
        if not 64 <= self.budget <= 4096:
            raise ValidationError(f"budget {self.budget} outside [64, 4096]")


@dataclass(frozen=True)
class CameraRig:
    count: int = 8
    radius: float = 2.5
    elevation: tuple = (0.1, 0.45)
    f: float = 60.0
    width: int = 64
    height: int = 64
    jitter: float = 0.15
    seed: int = 0
    near: float = 0.05

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError("rig needs at least one camera")
        if self.radius <= self.near:
            raise ValidationError("rig radius must exceed the near plane")

    def cameras(self) -> list:
        """Uniform azimuth ring with seeded jitter and per-view elevation."""
        rng = np.random.default_rng(self.seed)
        cams = []
        step = 2.0 * np.pi / self.count
        for k in range(self.count):
            az = step * (k + self.jitter * rng.uniform(-1.0, 1.0))
            el = rng.uniform(*self.elevation)
            cams.append(look_at(az, el, self.radius, self.f,
                                self.width, self.height, self.near))
        return cams


def look_at(azimuth: float, elevation: float, radius: float, f: float,
            width: int, height: int, near: float = 0.05) -> Camera:
    """Camera on the sphere at (azimuth, elevation), aimed at the origin."""
    pos = radius * np.array([
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
        np.cos(elevation) * np.cos(azimuth),
    ])
    fwd = -pos / np.linalg.norm(pos)
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    view = np.eye(4)
    view[0, :3] = right
    view[1, :3] = np.cross(fwd, right)
    view[2, :3] = fwd
    view[:3, 3] = -view[:3, :3] @ pos
    return Camera(view=view, f=f, width=width, height=height, near=near)


def input_cameras(rig: CameraRig) -> list:
    """The fixed 4-view stack the generator conditions on."""
    return [look_at(k * np.pi / 2.0, INPUT_ELEVATION, rig.radius, rig.f,
                    rig.width, rig.height, rig.near)
            for k in range(INPUT_VIEWS)]


@dataclass
class SceneSample:
    spec: SceneSpec
    rig: CameraRig
    cloud: GaussianCloud
    ring_cams: list
    input_cams: list
    input_stack: np.ndarray
    views: list = field(default_factory=list)


# ------------------------------------------------------------------ synthesis


def _param_grid(n: int):
    cols = int(np.ceil(np.sqrt(n)))
    k = np.arange(n)
    row, col = k // cols, k % cols
    rows = row.max() + 1
    return (row + 0.5) / rows, (col + 0.5) / cols


def _sphere_dirs(v, u):
    theta = np.arccos(np.clip(1.0 - 2.0 * v, -1.0, 1.0))
    phi = 2.0 * np.pi * u
    return np.stack([np.sin(theta) * np.cos(phi),
                     np.cos(theta),
                     np.sin(theta) * np.sin(phi)], axis=1)


def _positions(spec: SceneSpec, rng) -> np.ndarray:
    v, u = _param_grid(spec.budget)
    if spec.primitive == "sphere-shell":
        r = 0.55 + rng.normal(0.0, 0.015, spec.budget)[:, None]
        mu = r * _sphere_dirs(v, u)
    elif spec.primitive == "box":
        d = _sphere_dirs(v, u)
        mu = 0.45 * d / np.abs(d).max(axis=1, keepdims=True)
        mu += rng.normal(0.0, 0.01, mu.shape)
    else:  # two-blob: split the grid rows between two shells
        half = spec.budget // 2
        blobs = []
        for lo, hi, c, r0 in ((0, half, (-0.35, 0.0, 0.0), 0.30),
                              (half, spec.budget, (0.35, 0.08, 0.05), 0.25)):
            n = hi - lo
            vv = (np.arange(n) + 0.5) / n
            uu = u[lo:hi]
            r = r0 + rng.normal(0.0, 0.012, n)[:, None]
            blobs.append(np.asarray(c) + r * _sphere_dirs(vv, uu))
        mu = np.concatenate(blobs, axis=0)
    return np.clip(mu, -0.88, 0.88)


def _smooth_field(mu, rng, lo: float, hi: float, shape=()):
    """Low-frequency sinusoid of position, mapped into [lo, hi]."""
    out_shape = (mu.shape[0],) + shape
    k = rng.normal(size=(3,) + shape)
    k = k / np.linalg.norm(k, axis=0, keepdims=True) * rng.uniform(2.0, 5.0, shape)
    phase = rng.uniform(0.0, 2.0 * np.pi, shape)
    wave = np.sin(np.tensordot(mu, k, axes=(1, 0)) + phase)
    mid, amp = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return np.broadcast_to(mid + amp * wave, out_shape)


def _grid_order(mu: np.ndarray, cam: Camera) -> np.ndarray:
    """Cell assignment following the projected image layout in `cam`.

    Which Gaussian goes in which grid cell is arbitrary; banding rows by
    projected y and sorting bands by x keeps the flattened cloud roughly
    aligned with the first input view, which a convolutional generator can
    actually regress (a scrambled assignment forces a global map).
    """
    R, t = cam.view[:3, :3], cam.view[:3, 3]
    p = mu @ R.T + t
    z = np.maximum(p[:, 2], cam.near)
    u, v = p[:, 0] / z, p[:, 1] / z
    n = len(mu)
    cols = int(np.ceil(np.sqrt(n)))
    by_row = np.argsort(v, kind="stable")
    order = np.empty(n, dtype=int)
    for r0 in range(0, n, cols):
        band = by_row[r0:r0 + cols]
        order[r0:r0 + len(band)] = band[np.argsort(u[band], kind="stable")]
    return order


def synth_scene(spec: SceneSpec, rig: CameraRig | None = None) -> SceneSample:
    """Ground-truth cloud plus its rendered view set (reference renderer)."""
    rig = rig or CameraRig()
    pose = np.random.default_rng(spec.pose_seed)
    palette = np.random.default_rng(spec.palette_seed)

    mu = _positions(spec, pose)
    base = _smooth_field(mu, pose, 0.022, 0.058)
    aniso = pose.uniform(0.85, 1.2, (spec.budget, 3))
    s = np.clip(base[:, None] * aniso, 0.02, 0.06)
    tilt = np.stack([_smooth_field(mu, pose, -0.25, 0.25) for _ in range(3)], axis=1)
    q = np.concatenate([np.ones((spec.budget, 1)), tilt], axis=1)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    a = _smooth_field(mu, pose, 0.62, 0.93)
    c = np.stack([_smooth_field(mu, palette, 0.18, 0.82) for _ in range(3)], axis=1)
    order = _grid_order(mu, input_cameras(rig)[0])
    cloud = GaussianCloud(mu[order], q[order], s[order], a[order], c[order])

    ring_cams = rig.cameras()
    input_cams = input_cameras(rig)
    views = [render_reference(cloud, cam).pixels for cam in ring_cams]
    stack = np.concatenate([render_reference(cloud, cam).pixels
                            for cam in input_cams], axis=0)
    return SceneSample(spec, rig, cloud, ring_cams, input_cams, stack, views)


def synth_dataset(n_train: int, n_val: int, seed: int = 0,
                  rig: CameraRig | None = None, budget: int = 1024):
    """Seeded scene collections; primitives cycle through all kinds."""
    rig = rig or CameraRig()
    root = np.random.default_rng(seed)
    samples = []
    for i in range(n_train + n_val):
        spec = SceneSpec(primitive=PRIMITIVES[i % len(PRIMITIVES)], budget=budget,
                         palette_seed=int(root.integers(2**31)),
                         pose_seed=int(root.integers(2**31)))
        samples.append(synth_scene(spec, rig))
    return samples[:n_train], samples[n_train:], rig


def foreground_fraction(pixels: np.ndarray) -> float:
    """Share of pixels that differ from the white background."""
    return float((pixels < 1.0 - 1.0 / 255.0).any(axis=0).mean())


# ----------------------------------------------------------------- file layout


def save_rig(path, rig: CameraRig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"count={rig.count}\n")
        fh.write(f"radius={rig.radius!r}\n")
        fh.write(f"elevation={rig.elevation[0]!r},{rig.elevation[1]!r}\n")
        fh.write(f"f={rig.f!r}\n")
        fh.write(f"width={rig.width}\n")
        fh.write(f"height={rig.height}\n")
        fh.write(f"jitter={rig.jitter!r}\n")
        fh.write(f"seed={rig.seed}\n")
        fh.write(f"near={rig.near!r}\n")


def load_rig(path) -> CameraRig:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    try:
        return CameraRig(
            count=int(values["count"]), radius=float(values["radius"]),
            elevation=tuple(float(x) for x in values["elevation"].split(",")),
            f=float(values["f"]), width=int(values["width"]),
            height=int(values["height"]), jitter=float(values["jitter"]),
            seed=int(values["seed"]), near=float(values["near"]))
    except KeyError as e:
        raise FormatError(f"{path}: missing rig key {e.args[0]!r}") from None
    except ValueError as e:
        raise FormatError(f"{path}: bad rig value ({e})") from None


def save_dataset(root, samples, rig: CameraRig, *, png: bool = True) -> None:
    os.makedirs(root, exist_ok=True)
    save_rig(os.path.join(root, "rig.cfg"), rig)
    for i, sample in enumerate(samples):
        d = os.path.join(root, f"scene_{i:04d}")
        os.makedirs(d, exist_ok=True)
        save_cloud(os.path.join(d, "cloud.gseal"), sample.cloud)
        with open(os.path.join(d, "spec.cfg"), "w", encoding="utf-8") as fh:
            fh.write(f"primitive={sample.spec.primitive}\n")
            fh.write(f"budget={sample.spec.budget}\n")
            fh.write(f"palette_seed={sample.spec.palette_seed}\n")
            fh.write(f"pose_seed={sample.spec.pose_seed}\n")
        for k in range(INPUT_VIEWS):
            img = Image(sample.input_stack[3 * k:3 * k + 3])
            save_image_raw(os.path.join(d, f"input_{k:02d}.img"), img)
        for k, pixels in enumerate(sample.views):
            img = Image(np.clip(pixels, 0.0, 1.0))
            save_image_raw(os.path.join(d, f"view_{k:02d}.img"), img)
            if png:
                save_image_png(os.path.join(d, f"view_{k:02d}.png"), img)


def _load_spec(path) -> SceneSpec:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if line and "=" in line:
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
    return SceneSpec(primitive=values["primitive"], budget=int(values["budget"]),
                     palette_seed=int(values["palette_seed"]),
                     pose_seed=int(values["pose_seed"]))


def load_dataset(root):
    """Samples plus rig, read back from a synth-data directory."""
    rig_path = os.path.join(root, "rig.cfg")
    if not os.path.exists(rig_path):
        raise FormatError(f"{root}: no rig.cfg; not a dataset directory")
    rig = load_rig(rig_path)
    ring_cams = rig.cameras()
    input_cams = input_cameras(rig)
    samples = []
    for name in sorted(os.listdir(root)):
        d = os.path.join(root, name)
        if not (name.startswith("scene_") and os.path.isdir(d)):
            continue
        cloud = load_cloud(os.path.join(d, "cloud.gseal"))
        spec = _load_spec(os.path.join(d, "spec.cfg"))
        stack = np.concatenate([
            load_image_raw(os.path.join(d, f"input_{k:02d}.img")).pixels
            for k in range(INPUT_VIEWS)], axis=0)
        views = []
        k = 0
        while os.path.exists(os.path.join(d, f"view_{k:02d}.img")):
            views.append(load_image_raw(os.path.join(d, f"view_{k:02d}.img")).pixels)
            k += 1
        samples.append(SceneSample(spec, rig, cloud, ring_cams, input_cams,
                                   stack, views))
    if not samples:
        raise FormatError(f"{root}: dataset directory has no scenes")
    return samples, rig
