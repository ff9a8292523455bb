"""In-generation bit watermarking: losses, training loop, and harnesses.

The pipeline trains only the modulation blocks and their coefficients.
The generator and the bit decoder are pretrained, frozen, and digest-
checked so a training run can prove it never touched them.

Scenes are duck-typed: anything with ``input_stack`` ([12,64,64] view
stack), ``ring_cams`` (list of Camera), and for pretraining ``cloud``
(ground-truth GaussianCloud) works.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from gseal.errors import ConfigError, ShapeError, UsageError
from gseal.gradcore import AdamW, Tensor, as_tensor, bce_with_logits, mse, stack
from gseal.gaussians import ActivationSpec, SplatTensor, activate_splat, cloud_to_splat, splat_to_cloud
from gseal.nets import (
    HiddenCodec,
    Message,
    MOD_SITES,
    ModulationSet,
    ToyUNet,
    decode_bits,
    hidden_decode,
    hidden_encode,
    unet_forward,
)
from gseal.renderer import RenderConfig, render, render_tensor
from gseal.robustbench import psnr, ssim
from gseal.wavelet import ll

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "EvalResult",
    "SealedSystem",
    "loss_msg",
    "loss_consistency",
    "total_loss",
    "weights_digest",
    "freeze",
    "train_seal",
    "evaluate_seal",
    "pretrain_hidden",
    "evaluate_hidden",
    "pretrain_generator",
    "evaluate_generator",
    "ablate_positions",
    "grid_search_weights",
    "decoding_target_report",
    "splat_as_image",
]

DECODE_TARGETS = ("splat", "render", "render_dwt")
LOG_HEADER = "step,L_msg,L_gs,L_rgb,total,bit_acc"

SITE_ORDER = MOD_SITES  # ("input", "mid", "out")


@dataclass(frozen=True)
class TrainConfig:
    lambda_gs: float = 1000.0
    lambda_rgb: float = 300.0
    lr_modulation: float = 1e-4
    lr_coefficients: float = 1e-3
    batch_size: int = 2
    steps: int = 2000
    length: int = 16
    views_per_step: int = 8
    seed: int = 0
    sites: tuple = MOD_SITES
    decode_target: str = "render_dwt"

    def __post_init__(self):
        if self.lambda_gs < 0 or self.lambda_rgb < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.lr_modulation <= 0 or self.lr_coefficients <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.views_per_step < 1:
            raise ConfigError("views_per_step must be at least 1")
        sites = tuple(dict.fromkeys(self.sites))
        if not set(sites) <= set(MOD_SITES):
            raise ConfigError(f"unknown modulation site in {self.sites!r}")
        object.__setattr__(self, "sites", sites)
        if self.decode_target not in DECODE_TARGETS:
            raise ConfigError(f"decode_target must be one of {DECODE_TARGETS}")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key not in fields:
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                kwargs[key] = _coerce(fields[key], value)
        return cls(**kwargs)


def _coerce(field, value: str):
    if field.type in ("float", float):
        return float(value)
    if field.type in ("int", int):
        return int(value)
    if field.name == "sites":
        return tuple(s.strip() for s in value.split(",") if s.strip())
    return value


@dataclass(frozen=True)
class LossBreakdown:
    step: int
    l_msg: float
    l_gs: float
    l_rgb: float
    total: float
    bit_acc: float

    def check(self, cfg: TrainConfig) -> None:
        expect = self.l_msg + cfg.lambda_gs * self.l_gs + cfg.lambda_rgb * self.l_rgb
        if abs(self.total - expect) > 1e-9:
            raise UsageError(f"loss identity broken at step {self.step}: "
                             f"{self.total} vs {expect}")

    def csv_row(self) -> str:
        return (f"{self.step},{self.l_msg:.17g},{self.l_gs:.17g},"
                f"{self.l_rgb:.17g},{self.total:.17g},{self.bit_acc:.17g}")


@dataclass(frozen=True)
class EvalResult:
    bit_acc: float
    psnr: float
    ssim: float


# --------------------------------------------------------------------- losses


def loss_msg(message: Message, logits) -> Tensor:
    logits = as_tensor(logits)
    if logits.shape != (len(message.bits),):
        raise ShapeError(f"logits {logits.shape} vs message length {len(message.bits)}")
    return bce_with_logits(logits, message.bits.astype(np.float64))


def loss_consistency(g, g_clean, r, r_clean):
    """Plain MSE pulls toward the frozen clean pass; targets stay detached."""
    return mse(g, _detach(g_clean)), mse(r, _detach(r_clean))


def total_loss(parts, cfg: TrainConfig) -> Tensor:
    l_msg, l_gs, l_rgb = parts
    return as_tensor(l_msg) + cfg.lambda_gs * as_tensor(l_gs) + cfg.lambda_rgb * as_tensor(l_rgb)


def _detach(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ------------------------------------------------------------------- freezing


def freeze(module):
    """Mark a pretrained module so train_seal accepts it."""
    module.frozen = True
    return module


def weights_digest(params) -> str:
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
    return h.hexdigest()


def _require_frozen(gen: ToyUNet, codec: HiddenCodec) -> None:
    if not getattr(gen, "frozen", False):
        raise ConfigError("generator is not frozen; pretrain or freeze() it first")
    if not (getattr(codec, "decoder_frozen", False) or getattr(codec, "frozen", False)):
        raise ConfigError("bit decoder is not frozen; pretrain or freeze() it first")


# ------------------------------------------------------------------ the system


def splat_as_image(g) -> Tensor:
    """Raw [14,S,S] splat tensor as a [3,5S,S] pseudo-image for the decoder."""
    g = as_tensor(g)
    if g.ndim != 3 or g.shape[0] != 14:
        raise ShapeError(f"expected [14,S,S], got {g.shape}")
    S = g.shape[1]
    pad = Tensor(np.zeros((1, S, S)))
    from gseal.gradcore import concat

    return concat([g, pad], axis=0).reshape(3, 5 * S, S)


class SealedSystem:
    """A trained watermarking bundle, ready for evaluation and attack runs."""

    def __init__(self, gen: ToyUNet, codec: HiddenCodec, mods: ModulationSet,
                 message: Message, cfg: TrainConfig,
                 act_spec: ActivationSpec | None = None,
                 render_cfg: RenderConfig | None = None):
        self.gen = gen
        self.codec = codec
        self.mods = mods
        self.message = message
        self.cfg = cfg
        self.act_spec = act_spec or ActivationSpec()
        self.render_cfg = render_cfg or RenderConfig(dtype="float32")

    def watermarked_splat(self, scene) -> np.ndarray:
        out = unet_forward(self.gen, scene.input_stack, self.message,
                           self.mods, self.cfg.sites)
        return out.data

    def clean_splat(self, scene) -> np.ndarray:
        return unet_forward(self.gen, scene.input_stack).data

    def watermarked_cloud(self, scene):
        return splat_to_cloud(SplatTensor(self.watermarked_splat(scene)), self.act_spec)

    def clean_cloud(self, scene):
        return splat_to_cloud(SplatTensor(self.clean_splat(scene)), self.act_spec)

    def decode(self, views) -> np.ndarray:
        """Bits from rendered views [V,3,H,W], per the configured target."""
        views = as_tensor(np.asarray(views, dtype=np.float64))
        if self.cfg.decode_target == "render_dwt":
            views = ll(views)
        logits = hidden_decode(views, self.codec)
        return decode_bits(logits)

    def decode_scene(self, scene) -> np.ndarray:
        if self.cfg.decode_target == "splat":
            logits = hidden_decode(splat_as_image(self.watermarked_splat(scene)),
                                   self.codec)
            return decode_bits(logits)
        cloud = self.watermarked_cloud(scene)
        views = np.stack([render(cloud, cam, self.render_cfg).pixels
                          for cam in scene.ring_cams])
        return self.decode(views)


# ------------------------------------------------------------------- training


def _site_params(mods: ModulationSet, sites):
    blocks = {"input": mods.b_in, "mid": mods.b_mid, "out": mods.b_out}
    coeffs = {"input": mods.alpha, "mid": mods.beta, "out": mods.gamma}
    bp, cp = [], []
    for site in SITE_ORDER:
        if site in sites:
            bp.extend(blocks[site].params())
            cp.append(coeffs[site])
    return bp, cp


def _pick_cams(cams, V: int, rng) -> list:
    if V >= len(cams):
        return list(cams)
    order = rng.permutation(len(cams))[:V]
    return [cams[i] for i in order]


def _scene_losses(scene, gen, codec, mods, message, cfg, act_spec, rcfg, cams):
    g = unet_forward(gen, scene.input_stack, message, mods, cfg.sites)
    g_clean = unet_forward(gen, scene.input_stack).data
    l_gs = mse(g, g_clean)

    mu, a, s, q, c = activate_splat(g, act_spec)
    mu2, a2, s2, q2, c2 = activate_splat(g_clean, act_spec)
    views = stack([render_tensor(mu, q, s, a, c, cam, rcfg) for cam in cams])
    targets = np.stack([render_tensor(mu2, q2, s2, a2, c2, cam, rcfg).data
                        for cam in cams])
    l_rgb = mse(views, targets)

    if cfg.decode_target == "splat":
        logits = hidden_decode(splat_as_image(g), codec)
    else:
        d = ll(views) if cfg.decode_target == "render_dwt" else views
        logits = hidden_decode(d, codec).mean(axis=0)
    l_msg = loss_msg(message, logits)
    acc = float((decode_bits(logits) == message.bits).mean())
    return l_msg, l_gs, l_rgb, acc


def train_seal(scenes, gen: ToyUNet, codec: HiddenCodec, mods: ModulationSet,
               message: Message, cfg: TrainConfig, log_path=None):
    """Fit the modulation against frozen generator and decoder.

    Returns the per-step LossBreakdown list. Two optimizers: AdamW over the
    block weights and a faster AdamW over the three coefficients.
    """
    scenes = list(scenes)
    if not scenes:
        raise ConfigError("train_seal needs at least one scene")
    _require_frozen(gen, codec)
    if len(message.bits) != cfg.length or mods.length != cfg.length:
        raise ConfigError("message, modulation, and config disagree on bit length")

    digest_gen = weights_digest(gen.params())
    digest_dec = weights_digest(codec.decoder_params())

    act_spec = ActivationSpec()
    rcfg = RenderConfig(dtype="float32")
    rng = np.random.default_rng(cfg.seed)
    block_params, coeff_params = _site_params(mods, cfg.sites)
    opt_blocks = AdamW(block_params, lr=cfg.lr_modulation) if block_params else None
    opt_coeffs = AdamW(coeff_params, lr=cfg.lr_coefficients) if coeff_params else None
    frozen_params = gen.params() + codec.params()

    log: list[LossBreakdown] = []
    for step in range(cfg.steps):
        take = min(cfg.batch_size, len(scenes))
        batch = rng.choice(len(scenes), size=take, replace=False)
        parts_msg, parts_gs, parts_rgb, accs = [], [], [], []
        for i in batch:
            scene = scenes[i]
            cams = _pick_cams(scene.ring_cams, cfg.views_per_step, rng)
            l_msg, l_gs, l_rgb, acc = _scene_losses(
                scene, gen, codec, mods, message, cfg, act_spec, rcfg, cams)
            parts_msg.append(l_msg)
            parts_gs.append(l_gs)
            parts_rgb.append(l_rgb)
            accs.append(acc)
        inv = 1.0 / take
        l_msg = _mean_of(parts_msg, inv)
        l_gs = _mean_of(parts_gs, inv)
        l_rgb = _mean_of(parts_rgb, inv)
        total = total_loss((l_msg, l_gs, l_rgb), cfg)
        total.backward()
        if opt_blocks is not None:
            opt_blocks.step()
        if opt_coeffs is not None:
            opt_coeffs.step()
        for p in frozen_params:
            p.grad = None
        entry = LossBreakdown(step, float(l_msg.data), float(l_gs.data),
                              float(l_rgb.data), float(total.data),
                              float(np.mean(accs)))
        entry.check(cfg)
        log.append(entry)

    if weights_digest(gen.params()) != digest_gen:
        raise UsageError("generator weights drifted during train_seal")
    if weights_digest(codec.decoder_params()) != digest_dec:
        raise UsageError("decoder weights drifted during train_seal")

    if log_path is not None:
        write_log(log, log_path)
    return log


def _mean_of(parts, inv: float) -> Tensor:
    acc = parts[0]
    for p in parts[1:]:
        acc = acc + p
    return acc * inv


def write_log(log, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for entry in log:
            fh.write(entry.csv_row() + "\n")


# ----------------------------------------------------------------- evaluation


def evaluate_seal(system: SealedSystem, scenes) -> EvalResult:
    """Held-out decode accuracy plus watermarked-vs-clean render quality."""
    accs, psnrs, ssims = [], [], []
    for scene in scenes:
        wm = system.watermarked_cloud(scene)
        cl = system.clean_cloud(scene)
        views = np.stack([render(wm, cam, system.render_cfg).pixels
                          for cam in scene.ring_cams])
        refs = np.stack([render(cl, cam, system.render_cfg).pixels
                         for cam in scene.ring_cams])
        psnrs.append(psnr(views, refs))
        ssims.append(float(np.mean([ssim(v, r) for v, r in zip(views, refs)])))
        if system.cfg.decode_target == "splat":
            bits = system.decode_scene(scene)
        else:
            bits = system.decode(views)
        accs.append(float((bits == system.message.bits).mean()))
    return EvalResult(bit_acc=float(np.mean(accs)), psnr=float(np.mean(psnrs)),
                      ssim=float(np.mean(ssims)))


# ---------------------------------------------------------------- pretraining


def pretrain_hidden(images, codec: HiddenCodec, cfg: TrainConfig | None = None, *,
                    steps: int = 1500, batch_size: int = 8, lr: float = 1e-3,
                    use_dwt: bool = True, noise_sigma: float = 0.0,
                    warmup: int | None = None) -> HiddenCodec:
    """Joint encoder/decoder fit: BCE on bits plus MSE on the residual, 1:1.

    The first `warmup` steps (default steps//4) drop the image term so the
    carrier saturates and the decoder locks on before perceptual pressure
    shrinks the write amplitude; starting 1:1 from step 0 collapses the
    residual before the decoder reads anything and training never leaves
    chance level. The decoder is frozen afterwards; train_seal
    digest-checks it.
    """
    cfg = cfg or TrainConfig()
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if len(images) < 100:
        raise ConfigError(f"hidden pretraining needs >= 100 images, got {len(images)}")
    if warmup is None:
        warmup = steps // 4
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(codec.params(), lr=lr)
    for step in range(steps):
        batch = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x = np.stack([images[i] for i in batch])
        bits = rng.integers(0, 2, size=(len(batch), cfg.length)).astype(np.float64)
        enc = hidden_encode(x, bits, codec)
        d = enc
        if noise_sigma > 0:
            d = d + noise_sigma * rng.standard_normal(enc.shape)
        if use_dwt:
            d = ll(d)
        logits = hidden_decode(d, codec)
        loss = bce_with_logits(logits, bits)
        if step >= warmup:
            loss = loss + mse(enc, x)
        loss.backward()
        opt.step()
    codec.decoder_frozen = True
    return codec


def evaluate_hidden(images, codec: HiddenCodec, length: int, seed: int = 0, *,
                    use_dwt: bool = True) -> float:
    """Mean bit accuracy decoding freshly encoded held-out images."""
    rng = np.random.default_rng(seed)
    correct, total = 0, 0
    for im in images:
        message = Message.random(length, rng)
        enc = hidden_encode(np.asarray(im, dtype=np.float64), message, codec)
        d = ll(enc) if use_dwt else enc
        bits = decode_bits(hidden_decode(d, codec))
        correct += int((bits == message.bits).sum())
        total += length
    return correct / total


def pretrain_generator(scenes, gen: ToyUNet, cfg: TrainConfig | None = None, *,
                       steps: int = 800, batch_size: int = 2, lr: float = 1e-3,
                       render_views: int = 2, render_weight: float = 1.0) -> ToyUNet:
    """Regress splat tensors from view stacks; splat MSE plus render MSE.

    Freezes the generator when done.
    """
    cfg = cfg or TrainConfig()
    scenes = list(scenes)
    if not scenes:
        raise ConfigError("generator pretraining needs at least one scene")
    grid = scenes[0].input_stack.shape[-1] // 2
    for sc in scenes:
        if sc.cloud.count != grid * grid:
            raise ConfigError(f"scene has {sc.cloud.count} Gaussians; the "
                              f"generator emits a {grid}x{grid} grid")
    act_spec = ActivationSpec()
    rcfg = RenderConfig(dtype="float32")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(gen.params(), lr=lr)
    raw_targets = [cloud_to_splat(sc.cloud, act_spec).tensor for sc in scenes]
    view_cache: dict[tuple, np.ndarray] = {}
    for _ in range(steps):
        batch = rng.choice(len(scenes), size=min(batch_size, len(scenes)), replace=False)
        losses = []
        for i in batch:
            scene = scenes[i]
            g = unet_forward(gen, scene.input_stack)
            loss = mse(g, raw_targets[i])
            if render_weight > 0 and render_views > 0:
                mu, a, s, q, c = activate_splat(g, act_spec)
                cams = _pick_cams(scene.ring_cams, render_views, rng)
                for cam in cams:
                    key = (i, id(cam))
                    if key not in view_cache:
                        view_cache[key] = render(scene.cloud, cam, rcfg).pixels
                    r = render_tensor(mu, q, s, a, c, cam, rcfg)
                    loss = loss + (render_weight / len(cams)) * mse(r, view_cache[key])
            losses.append(loss)
        _mean_of(losses, 1.0 / len(batch)).backward()
        opt.step()
    return freeze(gen)


def evaluate_generator(gen: ToyUNet, scenes) -> float:
    """Mean PSNR of rendered reconstructions against ground-truth renders."""
    act_spec = ActivationSpec()
    rcfg = RenderConfig(dtype="float32")
    scores = []
    for scene in scenes:
        g = unet_forward(gen, scene.input_stack).data
        cloud = splat_to_cloud(SplatTensor(g), act_spec)
        for cam in scene.ring_cams:
            got = render(cloud, cam, rcfg).pixels
            want = render(scene.cloud, cam, rcfg).pixels
            scores.append(psnr(got, want))
    return float(np.mean(scores))


# ------------------------------------------------------------------ harnesses


ABLATION_SUBSETS = (
    (),
    ("input",),
    ("mid",),
    ("out",),
    ("input", "mid"),
    ("input", "out"),
    ("mid", "out"),
    ("input", "mid", "out"),
)


@dataclass(frozen=True)
class AblationRow:
    sites: tuple
    psnr: float
    bit_acc: float

    @property
    def label(self) -> str:
        return "+".join(self.sites) if self.sites else "none"


def ablate_positions(gen, codec, scenes_train, scenes_eval, message: Message,
                     cfg: TrainConfig):
    """One training run per site subset; the empty subset is scored untrained."""
    rows = []
    for subset in ABLATION_SUBSETS:
        sub_cfg = dataclasses.replace(cfg, sites=subset)
        mods = ModulationSet(cfg.length)
        if subset:
            train_seal(scenes_train, gen, codec, mods, message, sub_cfg)
        system = SealedSystem(gen, codec, mods, message, sub_cfg)
        if subset:
            result = evaluate_seal(system, scenes_eval)
            rows.append(AblationRow(subset, result.psnr, result.bit_acc))
        else:
            # nothing injected: watermarked output is the clean output
            accs = []
            for scene in scenes_eval:
                bits = system.decode_scene(scene)
                accs.append(float((bits == message.bits).mean()))
            rows.append(AblationRow(subset, float("inf"), float(np.mean(accs))))
    return rows


def grid_search_weights(candidates, gen, codec, scenes_train, scenes_eval,
                        message: Message, cfg: TrainConfig):
    """Train once per (lambda_gs, lambda_rgb) pair and score held-out scenes."""
    candidates = list(candidates)
    if not candidates:
        raise ConfigError("grid search needs at least one candidate pair")
    rows = []
    for lam_gs, lam_rgb in candidates:
        sub_cfg = dataclasses.replace(cfg, lambda_gs=float(lam_gs),
                                      lambda_rgb=float(lam_rgb))
        mods = ModulationSet(cfg.length)
        train_seal(scenes_train, gen, codec, mods, message, sub_cfg)
        result = evaluate_seal(SealedSystem(gen, codec, mods, message, sub_cfg),
                               scenes_eval)
        rows.append((float(lam_gs), float(lam_rgb), result.psnr, result.bit_acc))
    return rows


def decoding_target_report(gen, codecs: dict, scenes_train, scenes_eval,
                           message: Message, cfg: TrainConfig):
    """Compare decoding from the splat tensor, renders, and render LL bands.

    ``codecs`` maps each decode target to a codec pretrained on that domain
    under a matched budget. Returns (rows, csv_text).
    """
    missing = [t for t in DECODE_TARGETS if t not in codecs]
    if missing:
        raise ConfigError(f"no pretrained codec for target(s) {missing}")
    rows = []
    for target in DECODE_TARGETS:
        sub_cfg = dataclasses.replace(cfg, decode_target=target)
        mods = ModulationSet(cfg.length)
        train_seal(scenes_train, gen, codecs[target], mods, message, sub_cfg)
        result = evaluate_seal(SealedSystem(gen, codecs[target], mods, message, sub_cfg),
                               scenes_eval)
        rows.append((target, result.psnr, result.ssim, result.bit_acc))
    lines = ["target,psnr,ssim,bit_acc"]
    for target, p, s, acc in rows:
        lines.append(f"{target},{p:.4f},{s:.4f},{acc:.4f}")
    return rows, "\n".join(lines) + "\n"
