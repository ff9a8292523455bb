"""Learnable pieces of the watermarking pipeline.

Three families live here: a toy multi-view-to-splat UNet generator, a
message encoder/decoder pair for image watermark extraction, and the
additive bit-modulation blocks with their adaptive coefficients. The
modulation path is built so that a freshly initialized set is an exact
no-op on the generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gseal.errors import ShapeError, ValidationError
from gseal.wavelet import ll
from gseal.gradcore import (
    Parameter,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    custom_op,
    global_avg_pool,
    instance_norm,
    linear,
    relu,
    resize_bilinear,
    silu,
    tanh,
    upsample_nearest2x,
)

__all__ = [
    "Message",
    "ModulationBlock",
    "ModulationSet",
    "ToyUNet",
    "HiddenCodec",
    "tile_block",
    "message_to_tensor",
    "modulate_input",
    "modulate_mid",
    "modulate_out",
    "unet_forward",
    "hidden_decode",
    "hidden_encode",
    "decode_bits",
    "bit_accuracy",
    "MOD_SITES",
]

BLOCK = 8               # spatial size of every modulation block
MOD_SITES = ("input", "mid", "out")
RESIDUAL_BOUND = 0.1    # encoder perturbation cap, image units
DECODER_RES = 32        # decoder input resolution


# ------------------------------------------------------------------- messages


@dataclass(frozen=True)
class Message:
    """A bit string; length must be a multiple of 4 so hex round-trips."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8)
        if b.ndim != 1 or b.size == 0 or b.size % 4 != 0:
            raise ValidationError(f"message length {b.size} not a positive multiple of 4")
        if not np.all((b == 0) | (b == 1)):
            raise ValidationError("message bits must be 0 or 1")
        object.__setattr__(self, "bits", b)

    @property
    def length(self) -> int:
        return int(self.bits.size)

    @classmethod
    def from_hex(cls, text: str) -> "Message":
        if not isinstance(text, str) or not text.lower().startswith("0x") or len(text) <= 2:
            raise ValidationError(f"expected 0x-prefixed hex, got {text!r}")
        digits = text[2:]
        try:
            value = int(digits, 16)
        except ValueError:
            raise ValidationError(f"invalid hex digits in {text!r}") from None
        L = 4 * len(digits)
        bits = (value >> np.arange(L - 1, -1, -1)) & 1  # MSB first
        return cls(bits.astype(np.uint8))

    @property
    def hex(self) -> str:
        value = 0
        for b in self.bits:
            value = (value << 1) | int(b)
        return "0x" + format(value, "0{}X".format(self.length // 4))

    @classmethod
    def random(cls, length: int, rng) -> "Message":
        return cls(rng.integers(0, 2, size=length).astype(np.uint8))

    def to_tensor(self) -> Tensor:
        return Tensor(self.bits.astype(np.float64))


def message_to_tensor(msg: Message) -> Tensor:
    return msg.to_tensor()


def _msg_tensor(m) -> Tensor:
    if isinstance(m, Message):
        return m.to_tensor()
    return as_tensor(m)


# --------------------------------------------------------------------- layers


class Conv:
    def __init__(self, cin, cout, name, rng=None, stride=1, zero=False):
        if zero:
            W = np.zeros((cout, cin, 3, 3))
        else:
            W = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
        self.W = Parameter(W, name=f"{name}.W")
        self.b = Parameter(np.zeros(cout), name=f"{name}.b")
        self.stride = stride

    def __call__(self, x):
        return conv2d(x, self.W, self.b, stride=self.stride, padding=1)

    def params(self):
        return [self.W, self.b]


class Norm:
    def __init__(self, c, name):
        self.gain = Parameter(np.ones(c), name=f"{name}.gain")
        self.bias = Parameter(np.zeros(c), name=f"{name}.bias")

    def __call__(self, x):
        return instance_norm(x, self.gain, self.bias)

    def params(self):
        return [self.gain, self.bias]


class Block:
    """conv 3x3 -> instance norm -> activation.

    `norm=False` drops the normalization. The message reaches the codec
    encoder as spatially constant channels, and instance norm subtracts
    exactly that per-channel constant back out, so the encoder trunk
    must run unnormalized to keep the bits in the signal path.
    """

    def __init__(self, cin, cout, name, rng, stride=1, act=silu, norm=True):
        self.conv = Conv(cin, cout, f"{name}.conv", rng, stride=stride)
        self.norm = Norm(cout, f"{name}.norm") if norm else None
        self.act = act

    def __call__(self, x):
        h = self.conv(x)
        if self.norm is not None:
            h = self.norm(h)
        return self.act(h)

    def params(self):
        out = self.conv.params()
        if self.norm is not None:
            out = out + self.norm.params()
        return out


class LinearLayer:
    def __init__(self, din, dout, name, rng=None, zero=False):
        if zero:
            W = np.zeros((din, dout))
        else:
            W = rng.normal(0.0, np.sqrt(2.0 / din), (din, dout))
        self.W = Parameter(W, name=f"{name}.W")
        self.b = Parameter(np.zeros(dout), name=f"{name}.b")

    def __call__(self, x):
        return linear(x, self.W, self.b)

    def params(self):
        return [self.W, self.b]


# ------------------------------------------------------------- bit modulation


def tile_block(e, H: int, W: int, c_target: int) -> Tensor:
    """Tile a [C,8,8] block over HxW; channels repeat cyclically to c_target."""
    e = as_tensor(e)
    if e.ndim != 3 or e.shape[1] != BLOCK or e.shape[2] != BLOCK:
        raise ShapeError(f"expected [C,{BLOCK},{BLOCK}] block, got {e.shape}")
    if H % BLOCK or W % BLOCK:
        raise ShapeError(f"target {H}x{W} not divisible by the block size {BLOCK}")
    C = e.shape[0]
    ch = np.arange(c_target) % C
    out = np.tile(e.data[ch], (1, H // BLOCK, W // BLOCK))

    def vjp(g):
        folded = g.reshape(c_target, H // BLOCK, BLOCK, W // BLOCK, BLOCK).sum(axis=(1, 3))
        ge = np.zeros_like(e.data)
        np.add.at(ge, ch, folded)
        return (ge,)

    return custom_op((e,), out, vjp)


class ModulationBlock:
    """linear L -> C*8*8, SiLU, reshape, 3x3 conv.

    The output conv starts at zero (weights and bias), so the block emits
    exactly nothing until training moves it and the watermarked forward is
    the clean forward bit for bit. The linear layer must NOT start at zero:
    zeroing it too makes {fc, conv.W} a gradient fixed point (each factor's
    gradient is gated by the other being zero) and the block can then never
    express anything beyond a per-channel constant, which normalization
    layers downstream cancel. A live fc gives the conv weights gradient
    from the first step while preserving the zero output at init.
    """

    def __init__(self, length: int, c: int, name: str, rng=None):
        rng = rng or np.random.default_rng(0)
        self.length = length
        self.c = c
        self.fc = LinearLayer(length, c * BLOCK * BLOCK, f"{name}.fc", rng)
        self.conv = Conv(c, c, f"{name}.conv", zero=True)

    def __call__(self, m) -> Tensor:
        mt = _msg_tensor(m)
        if mt.shape != (self.length,):
            raise ShapeError(f"message length {mt.shape} != ({self.length},)")
        h = self.fc(mt.reshape(1, self.length))
        h = silu(h).reshape(self.c, BLOCK, BLOCK)
        return self.conv(h)

    def params(self):
        return self.fc.params() + self.conv.params()


class ModulationSet:
    """Three injection blocks plus the adaptive coefficients alpha/beta/gamma."""

    def __init__(self, length: int, c_in: int = 4, c_mid: int = 128, c_out: int = 32,
                 coeff_init: float = 0.1, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.length = length
        self.b_in = ModulationBlock(length, c_in, "mod.b_in", rng)
        self.b_mid = ModulationBlock(length, c_mid, "mod.b_mid", rng)
        self.b_out = ModulationBlock(length, c_out, "mod.b_out", rng)
        self.alpha = Parameter(np.float64(coeff_init), name="mod.alpha")
        self.beta = Parameter(np.float64(coeff_init), name="mod.beta")
        self.gamma = Parameter(np.float64(coeff_init), name="mod.gamma")

    def block_params(self):
        return self.b_in.params() + self.b_mid.params() + self.b_out.params()

    def coeff_params(self):
        return [self.alpha, self.beta, self.gamma]

    def params(self):
        return self.block_params() + self.coeff_params()


def _inject(z, block: ModulationBlock, coeff: Parameter, m) -> Tensor:
    z = as_tensor(z)
    spatial = z.shape[-2:]
    c_target = z.shape[-3]
    field = tile_block(block(m), spatial[0], spatial[1], c_target)
    return z + coeff * field


def modulate_input(z, m, mods: ModulationSet) -> Tensor:
    return _inject(z, mods.b_in, mods.alpha, m)


def modulate_mid(h, m, mods: ModulationSet) -> Tensor:
    return _inject(h, mods.b_mid, mods.beta, m)


def modulate_out(h, m, mods: ModulationSet) -> Tensor:
    return _inject(h, mods.b_out, mods.gamma, m)


# ------------------------------------------------------------------ generator


class ToyUNet:
    """Multi-view image stack -> 14-channel splat tensor at half resolution.

    Three stride-2 encoder blocks at widths (32, 64, 128), two decoder
    blocks with skip connections. Output spatial size is input/2.
    """

    def __init__(self, in_ch: int = 12, out_ch: int = 14,
                 widths: tuple = (32, 64, 128), seed: int = 0):
        rng = np.random.default_rng(seed)
        w1, w2, w3 = widths
        self.in_ch = in_ch
        self.stem = Block(in_ch, w1, "unet.stem", rng)
        self.enc1 = Block(w1, w1, "unet.enc1", rng, stride=2)
        self.enc2 = Block(w1, w2, "unet.enc2", rng, stride=2)
        self.enc3 = Block(w2, w3, "unet.enc3", rng, stride=2)
        self.dec1 = Block(w3 + w2, w2, "unet.dec1", rng)
        self.dec2 = Block(w2 + w1, w1, "unet.dec2", rng)
        self.head = Conv(w1, out_ch, "unet.head", rng)
        self.mid_channels = w3
        self.out_channels = w1

    def params(self):
        parts = [self.stem, self.enc1, self.enc2, self.enc3,
                 self.dec1, self.dec2, self.head]
        out = []
        for p in parts:
            out.extend(p.params())
        return out


def _check_unet_input(gen: ToyUNet, x) -> Tensor:
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    c, h, w = x.shape[-3:]
    if c != gen.in_ch:
        raise ShapeError(f"input has {c} channels, generator expects {gen.in_ch}")
    if h % 8 or w % 8 or h < 16 or w < 16:
        raise ShapeError(f"spatial size {h}x{w} incompatible with three 2x downsamplings")
    return x


def unet_forward(gen: ToyUNet, x, m=None, mods: ModulationSet | None = None,
                 sites=MOD_SITES) -> Tensor:
    """Generator forward pass with optional message injection.

    With ``m`` of None (or no enabled site) this is exactly the clean pass.
    """
    x = _check_unet_input(gen, x)
    sites = frozenset(sites)
    if not sites <= frozenset(MOD_SITES):
        raise ValidationError(f"unknown modulation sites {sorted(sites - frozenset(MOD_SITES))}")
    on = m is not None and mods is not None

    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)

    if on and "input" in sites:
        x = modulate_input(x, m, mods)
    z = gen.stem(x)
    e1 = gen.enc1(z)
    e2 = gen.enc2(e1)
    h = gen.enc3(e2)
    if on and "mid" in sites:
        h = modulate_mid(h, m, mods)
    d = gen.dec1(concat([upsample_nearest2x(h), e2], axis=1))
    d = gen.dec2(concat([upsample_nearest2x(d), e1], axis=1))
    if on and "out" in sites:
        d = modulate_out(d, m, mods)
    g = gen.head(d)
    return g.reshape(*g.shape[1:]) if squeeze else g


# -------------------------------------------------------------- message codec


PATTERN_CHANNELS = 8    # spatial carrier maps synthesized from the message


class HiddenCodec:
    """Watermark encoder/decoder pair over small images.

    The decoder is six conv+norm+ReLU blocks at width 64 (three of them
    stride 2), global average pooling and a linear head to L logits.
    The encoder exists for decoder pretraining only: it adds a
    message-conditioned residual bounded to +-0.1.

    The message reaches the encoder as a superposition of per-bit spatial
    patterns (a linear map from bit signs to an 8x8 pattern bank, resized
    to the trunk resolution). Constant per-bit fields don't survive the
    trunk in any usable form; per-bit patterns keep the bits linearly
    separable for the decoder from the first step on.
    """

    def __init__(self, length: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.length = length
        strides = (1, 2, 2, 2, 1, 1)
        cins = (3, 64, 64, 64, 64, 64)
        self.dec_blocks = [
            Block(cin, 64, f"codec.dec{i}", rng, stride=st, act=relu)
            for i, (cin, st) in enumerate(zip(cins, strides))
        ]
        self.dec_head = LinearLayer(64, length, "codec.dec_head", rng)
        self.msg_fc = LinearLayer(
            length, PATTERN_CHANNELS * BLOCK * BLOCK, "codec.msg_fc", rng)
        self.enc1 = Block(3 + PATTERN_CHANNELS, 32, "codec.enc1", rng,
                          act=relu, norm=False)
        self.enc2 = Block(32, 32, "codec.enc2", rng, act=relu, norm=False)
        # He init, not zero: a dead carrier at step 0 lets the image MSE win
        # before the decoder learns to read anything.
        self.enc_head = Conv(32 + PATTERN_CHANNELS, 3, "codec.enc_head", rng=rng)

    def decoder_params(self):
        out = []
        for b in self.dec_blocks:
            out.extend(b.params())
        return out + self.dec_head.params()

    def encoder_params(self):
        return (self.msg_fc.params() + self.enc1.params()
                + self.enc2.params() + self.enc_head.params())

    def params(self):
        return self.decoder_params() + self.encoder_params()


def hidden_decode(d, codec: HiddenCodec) -> Tensor:
    """Logits for one LL image [3,H,W] or a batch [B,3,H,W]."""
    d = as_tensor(d)
    squeeze = d.ndim == 3
    if squeeze:
        d = d.reshape(1, *d.shape)
    if d.ndim != 4 or d.shape[1] != 3:
        raise ShapeError(f"decoder expects [B,3,H,W], got {d.shape}")
    if d.shape[-2:] != (DECODER_RES, DECODER_RES):
        d = resize_bilinear(d, DECODER_RES, DECODER_RES)
    h = d
    for b in codec.dec_blocks:
        h = b(h)
    logits = codec.dec_head(global_avg_pool(h))
    return logits.reshape(codec.length) if squeeze else logits


def hidden_encode(img, m, codec: HiddenCodec) -> Tensor:
    """img + bounded residual conditioned on the message (pretraining only).

    `m` is either one message (broadcast over the batch) or a [B, L] bit
    array giving each sample its own message.

    The trunk runs on the half-resolution low-pass band and the residual
    is upsampled 2x nearest before the add, so every unit of perturbation
    budget lands in the band the decoder reads. Extents must be even.
    """
    img = as_tensor(img)
    squeeze = img.ndim == 3
    if squeeze:
        img = img.reshape(1, *img.shape)
    B, C, H, W = img.shape
    hh, ww = H // 2, W // 2
    mt = _msg_tensor(m)
    if mt.ndim == 2:
        if mt.shape != (B, codec.length):
            raise ShapeError(f"message batch {mt.shape} != ({B}, {codec.length})")
        signs = mt * 2.0 - 1.0
    else:
        if mt.shape != (codec.length,):
            raise ShapeError(f"message length {mt.shape} != ({codec.length},)")
        signs = (mt * 2.0 - 1.0).reshape(1, codec.length)
    patt = codec.msg_fc(signs).reshape(-1, PATTERN_CHANNELS, BLOCK, BLOCK)
    if patt.shape[0] != B:
        patt = patt * np.ones((B, 1, 1, 1))
    patt = resize_bilinear(patt, hh, ww)
    h = codec.enc1(concat([ll(img), patt], axis=1))
    h = codec.enc2(h)
    r = tanh(codec.enc_head(concat([h, patt], axis=1)))
    out = img + RESIDUAL_BOUND * upsample_nearest2x(r)
    return out.reshape(C, H, W) if squeeze else out


def decode_bits(logits) -> np.ndarray:
    """Threshold logits at 0; a [V,L] stack is averaged over views first."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if arr.ndim == 2:
        arr = arr.mean(axis=0)
    return (arr > 0).astype(np.uint8)


def bit_accuracy(bits: np.ndarray, msg: Message) -> float:
    bits = np.asarray(bits)
    if bits.shape != msg.bits.shape:
        raise ShapeError(f"bit shape {bits.shape} != message {msg.bits.shape}")
    return float((bits == msg.bits).mean())
