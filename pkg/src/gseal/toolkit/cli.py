"""Command-line surface for the whole pipeline.

Every stochastic command takes --seed; identical flags reproduce identical
raw outputs. Errors come back as a message on stderr and a nonzero exit.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from gseal.errors import ConfigError, FormatError, ShapeError, UsageError, ValidationError
from gseal.gaussians import SplatTensor, load_cloud, prune, save_cloud, splat_to_cloud
from gseal.gradcore import assign_weights, load_weights, save_weights
from gseal.nets import HiddenCodec, Message, ModulationSet, ToyUNet, decode_bits, hidden_decode
from gseal.renderer import (
    Camera,
    Image,
    RenderConfig,
    load_image_raw,
    render,
    save_image_png,
    save_image_raw,
)
from gseal.robustbench import AttackSpec, apply_image_attack, run_robustness
from gseal.seal import (
    SealedSystem,
    TrainConfig,
    ablate_positions,
    decoding_target_report,
    evaluate_generator,
    evaluate_hidden,
    evaluate_seal,
    freeze,
    grid_search_weights,
    pretrain_generator,
    pretrain_hidden,
    train_seal,
    write_log,
)
from gseal.toolkit.reports import report_assemble
from gseal.toolkit.scenes import CameraRig, load_dataset, load_rig, save_dataset, synth_dataset
from gseal.wavelet import ll

CLI_ERRORS = (ConfigError, FormatError, ShapeError, UsageError, ValidationError,
              FileNotFoundError, NotADirectoryError, IsADirectoryError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLI_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gseal",
                                description="bit watermarking for a splat generator")
    sub = p.add_subparsers(dest="command", required=True)

    sd = sub.add_parser("synth-data", help="synthesize a multi-view dataset")
    sd.add_argument("--out", required=True)
    sd.add_argument("--scenes", type=int, default=64)
    sd.add_argument("--val-scenes", type=int, default=16)
    sd.add_argument("--seed", type=int, default=0)
    sd.add_argument("--views", type=int, default=8)
    sd.add_argument("--size", type=int, default=64)
    sd.add_argument("--budget", type=int, default=1024)
    sd.add_argument("--no-png", action="store_true")
    sd.set_defaults(func=cmd_synth_data)

    ph = sub.add_parser("pretrain-hidden", help="pretrain the bit codec")
    ph.add_argument("--data", required=True)
    ph.add_argument("--bits", type=int, default=16)
    ph.add_argument("--out", required=True)
    ph.add_argument("--steps", type=int, default=1500)
    ph.add_argument("--lr", type=float, default=1e-3)
    ph.add_argument("--noise", type=float, default=0.0)
    ph.add_argument("--seed", type=int, default=0)
    ph.set_defaults(func=cmd_pretrain_hidden)

    pg = sub.add_parser("pretrain-generator", help="pretrain the splat generator")
    pg.add_argument("--data", required=True)
    pg.add_argument("--out", required=True)
    pg.add_argument("--steps", type=int, default=800)
    pg.add_argument("--lr", type=float, default=1e-3)
    pg.add_argument("--seed", type=int, default=0)
    pg.set_defaults(func=cmd_pretrain_generator)

    ts = sub.add_parser("train-seal", help="train the modulation for one message")
    ts.add_argument("--data", required=True)
    ts.add_argument("--gen", required=True)
    ts.add_argument("--dec", required=True)
    ts.add_argument("--message", required=True)
    ts.add_argument("--config")
    ts.add_argument("--out", required=True)
    ts.add_argument("--log")
    ts.add_argument("--seed", type=int)
    ts.add_argument("--steps", type=int)
    ts.set_defaults(func=cmd_train_seal)

    ge = sub.add_parser("generate", help="emit a (watermarked) splat file")
    ge.add_argument("--gen", required=True)
    ge.add_argument("--seal")
    ge.add_argument("--message")
    ge.add_argument("--input", required=True, help="scene directory")
    ge.add_argument("--out", required=True)
    ge.set_defaults(func=cmd_generate)

    re_ = sub.add_parser("render", help="render a splat file through a rig")
    re_.add_argument("--splat", required=True)
    re_.add_argument("--rig", required=True)
    re_.add_argument("--out", required=True)
    re_.set_defaults(func=cmd_render)

    ve = sub.add_parser("verify", help="decode a splat file and check the message")
    ve.add_argument("--splat", required=True)
    ve.add_argument("--dec", required=True)
    ve.add_argument("--message", required=True)
    ve.add_argument("--rig")
    ve.set_defaults(func=cmd_verify)

    at = sub.add_parser("attack", help="apply one attack to a splat or image file")
    at.add_argument("--splat")
    at.add_argument("--image")
    at.add_argument("--kind", required=True)
    at.add_argument("--param", type=float, required=True)
    at.add_argument("--seed", type=int, default=0)
    at.add_argument("--out", required=True)
    at.set_defaults(func=cmd_attack)

    rp = sub.add_parser("report", help="run a result suite and write its CSV")
    rp.add_argument("--suite", required=True,
                    choices=("robustness", "positions", "weights", "targets"))
    rp.add_argument("--out", required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--gen", required=True)
    rp.add_argument("--dec")
    rp.add_argument("--seal")
    rp.add_argument("--message", default="0xA5C3")
    rp.add_argument("--config")
    rp.add_argument("--steps", type=int)
    rp.add_argument("--seed", type=int)
    rp.add_argument("--pretrain-steps", type=int, default=1500)
    rp.add_argument("--candidates", help="weights suite: gs:rgb pairs, comma-separated")
    rp.set_defaults(func=cmd_report)
    return p


# ------------------------------------------------------------------- loaders


def _load_generator(path) -> ToyUNet:
    gen = ToyUNet()
    assign_weights(gen.params(), load_weights(path))
    return freeze(gen)


def _load_codec(path) -> HiddenCodec:
    loaded = load_weights(path)
    try:
        length = loaded["codec.dec_head.W"].shape[1]
    except KeyError:
        raise FormatError(f"{path}: not a codec checkpoint") from None
    codec = HiddenCodec(int(length))
    assign_weights(codec.params(), loaded)
    codec.decoder_frozen = True
    return codec


def _load_mods(path) -> ModulationSet:
    loaded = load_weights(path)
    try:
        length = loaded["mod.b_in.fc.W"].shape[0]
    except KeyError:
        raise FormatError(f"{path}: not a modulation checkpoint") from None
    mods = ModulationSet(int(length))
    assign_weights(mods.params(), loaded)
    return mods


def _load_splits(data):
    train, rig = load_dataset(os.path.join(data, "train"))
    val_dir = os.path.join(data, "val")
    val = load_dataset(val_dir)[0] if os.path.isdir(val_dir) else []
    return train, val, rig


def _dataset_images(samples):
    images = []
    for s in samples:
        images.extend(s.views)
        images.extend(s.input_stack[3 * k:3 * k + 3] for k in range(4))
    return images


def _train_config(args, message: Message) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.from_file(args.config)
        if cfg.length != message.length:
            raise ConfigError(f"config length {cfg.length} != message length "
                              f"{message.length}")
    else:
        cfg = TrainConfig(length=message.length)
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        updates["steps"] = args.steps
    return dataclasses.replace(cfg, **updates) if updates else cfg


# ------------------------------------------------------------------ commands


def cmd_synth_data(args) -> int:
    rig = CameraRig(count=args.views, width=args.size, height=args.size,
                    seed=args.seed)
    train, val, rig = synth_dataset(args.scenes, args.val_scenes, seed=args.seed,
                                    rig=rig, budget=args.budget)
    save_dataset(os.path.join(args.out, "train"), train, rig, png=not args.no_png)
    if val:
        save_dataset(os.path.join(args.out, "val"), val, rig, png=not args.no_png)
    print(f"wrote {len(train)} train + {len(val)} val scenes to {args.out}")
    return 0


def cmd_pretrain_hidden(args) -> int:
    train, val, _ = _load_splits(args.data)
    codec = HiddenCodec(args.bits, seed=args.seed)
    cfg = TrainConfig(length=args.bits, seed=args.seed)
    pretrain_hidden(_dataset_images(train), codec, cfg, steps=args.steps,
                    lr=args.lr, noise_sigma=args.noise)
    save_weights(args.out, codec.params())
    if val:
        acc = evaluate_hidden(_dataset_images(val), codec, args.bits, seed=args.seed)
        print(f"held-out bit accuracy: {acc:.4f}")
    print(f"codec checkpoint written to {args.out}")
    return 0


def cmd_pretrain_generator(args) -> int:
    train, val, _ = _load_splits(args.data)
    gen = ToyUNet(seed=args.seed)
    cfg = TrainConfig(seed=args.seed)
    pretrain_generator(train, gen, cfg, steps=args.steps, lr=args.lr)
    save_weights(args.out, gen.params())
    if val:
        print(f"held-out reconstruction PSNR: {evaluate_generator(gen, val):.2f} dB")
    print(f"generator checkpoint written to {args.out}")
    return 0


def cmd_train_seal(args) -> int:
    message = Message.from_hex(args.message)
    cfg = _train_config(args, message)
    train, val, _ = _load_splits(args.data)
    gen = _load_generator(args.gen)
    codec = _load_codec(args.dec)
    if codec.length != message.length:
        raise ConfigError(f"codec decodes {codec.length} bits, message has "
                          f"{message.length}")
    mods = ModulationSet(message.length)
    log = train_seal(train, gen, codec, mods, message, cfg, log_path=args.log)
    save_weights(args.out, mods.params())
    result = evaluate_seal(SealedSystem(gen, codec, mods, message, cfg),
                           val or train)
    print(f"final: L_msg={log[-1].l_msg:.4f} bit_acc={result.bit_acc:.4f} "
          f"psnr={result.psnr:.2f} dB")
    print(f"modulation checkpoint written to {args.out}")
    return 0


def cmd_generate(args) -> int:
    gen = _load_generator(args.gen)
    stack = np.concatenate([
        load_image_raw(os.path.join(args.input, f"input_{k:02d}.img")).pixels
        for k in range(4)], axis=0)
    if args.message is None:
        from gseal.nets import unet_forward

        raw = unet_forward(gen, stack).data
    else:
        if args.seal is None:
            raise ConfigError("--message needs --seal (the trained modulation)")
        message = Message.from_hex(args.message)
        mods = _load_mods(args.seal)
        if mods.length != message.length:
            raise ConfigError("modulation checkpoint length != message length")
        from gseal.nets import unet_forward

        raw = unet_forward(gen, stack, message, mods).data
    from gseal.gaussians import ActivationSpec

    cloud = splat_to_cloud(SplatTensor(raw), ActivationSpec())
    save_cloud(args.out, cloud)
    kind = "clean" if args.message is None else "watermarked"
    print(f"{kind} splat file written to {args.out} ({cloud.count} Gaussians)")
    return 0


def cmd_render(args) -> int:
    cloud = load_cloud(args.splat)
    rig = load_rig(args.rig)
    os.makedirs(args.out, exist_ok=True)
    for k, cam in enumerate(rig.cameras()):
        img = render(cloud, cam, RenderConfig())
        save_image_raw(os.path.join(args.out, f"view_{k:02d}.img"), img)
        save_image_png(os.path.join(args.out, f"view_{k:02d}.png"), img)
    print(f"rendered {rig.count} views to {args.out}")
    return 0


def cmd_verify(args) -> int:
    message = Message.from_hex(args.message)
    codec = _load_codec(args.dec)
    if codec.length != message.length:
        raise ConfigError("codec bit length != message length")
    cloud = load_cloud(args.splat)
    rig = load_rig(args.rig) if args.rig else CameraRig()
    views = np.stack([render(cloud, cam, RenderConfig(dtype="float32")).pixels
                      for cam in rig.cameras()])
    logits = hidden_decode(ll(views), codec)
    bits = decode_bits(logits)
    acc = float((bits == message.bits).mean())
    print(f"bit_accuracy={acc:.4f} decoded={Message(bits).hex}")
    return 0 if acc == 1.0 else 1


def cmd_attack(args) -> int:
    if (args.splat is None) == (args.image is None):
        raise ConfigError("pass exactly one of --splat or --image")
    if args.splat is not None:
        if args.kind != "prune":
            raise ConfigError(f"{args.kind!r} is an image attack; use --image")
        cloud = prune(load_cloud(args.splat), args.param, seed=args.seed)
        save_cloud(args.out, cloud)
        print(f"pruned cloud written to {args.out} ({cloud.count} Gaussians)")
        return 0
    img = load_image_raw(args.image)
    spec = AttackSpec(args.kind, args.param, args.seed)
    out = Image(np.clip(apply_image_attack(spec, img.pixels), 0.0, 1.0))
    if args.out.endswith(".png"):
        save_image_png(args.out, out)
    else:
        save_image_raw(args.out, out)
    print(f"attacked image written to {args.out}")
    return 0


DEFAULT_ATTACKS = (
    AttackSpec("prune", 0.05),
    AttackSpec("prune", 0.10),
    AttackSpec("prune", 0.15),
    AttackSpec("prune", 0.25),
    AttackSpec("noise", 0.1),
    AttackSpec("crop", 0.40),
    AttackSpec("rotate", 60.0),
    AttackSpec("brightness", 2.0),
    AttackSpec("blur", 5),
    AttackSpec("jpeg", 10),
)


def _parse_candidates(text):
    pairs = []
    for chunk in text.split(","):
        gs, _, rgb = chunk.strip().partition(":")
        pairs.append((float(gs), float(rgb)))
    return pairs


def cmd_report(args) -> int:
    message = Message.from_hex(args.message)
    cfg = _train_config(args, message)
    train, val, _ = _load_splits(args.data)
    scenes_eval = val or train
    gen = _load_generator(args.gen)

    if args.suite == "robustness":
        if not (args.dec and args.seal):
            raise ConfigError("robustness suite needs --dec and --seal")
        system = SealedSystem(gen, _load_codec(args.dec), _load_mods(args.seal),
                              message, cfg)
        reports = run_robustness(system, DEFAULT_ATTACKS, scenes_eval)
        rows = [(r.attack, f"{r.param:g}", r.psnr, r.ssim, r.bit_accuracy)
                for r in reports]
        header = ["attack", "param", "psnr", "ssim", "bit_acc"]
    elif args.suite == "positions":
        if not args.dec:
            raise ConfigError("positions suite needs --dec")
        rows_ = ablate_positions(gen, _load_codec(args.dec), train, scenes_eval,
                                 message, cfg)
        rows = [(r.label, r.psnr, r.bit_acc) for r in rows_]
        header = ["sites", "psnr", "bit_acc"]
    elif args.suite == "weights":
        if not args.dec:
            raise ConfigError("weights suite needs --dec")
        candidates = (_parse_candidates(args.candidates) if args.candidates
                      else [(3000, 100), (2000, 100), (1000, 300), (1000, 100), (500, 100)])
        rows = grid_search_weights(candidates, gen, _load_codec(args.dec),
                                   train, scenes_eval, message, cfg)
        header = ["lambda_gs", "lambda_rgb", "psnr", "bit_acc"]
    else:  # targets
        codecs = {}
        images = _dataset_images(train)
        from gseal.seal import splat_as_image
        from gseal.gaussians import ActivationSpec, cloud_to_splat

        spec = ActivationSpec()
        splat_images = [splat_as_image(cloud_to_splat(s.cloud, spec).tensor).data
                        for s in train]
        while len(splat_images) < 100:
            splat_images.extend(splat_images[:100 - len(splat_images)])
        for target, corpus, dwt in (("splat", splat_images, False),
                                    ("render", images, False),
                                    ("render_dwt", images, True)):
            codec = HiddenCodec(message.length, seed=cfg.seed)
            pretrain_hidden(corpus, codec, cfg, steps=args.pretrain_steps,
                            use_dwt=dwt)
            codecs[target] = codec
        rows_, _ = decoding_target_report(gen, codecs, train, scenes_eval,
                                          message, cfg)
        rows = rows_
        header = ["target", "psnr", "ssim", "bit_acc"]

    csv_text, text = report_assemble(header, rows)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(text, end="")
    print(f"report written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
