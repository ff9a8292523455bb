import numpy as np
import pytest

from gseal.errors import ShapeError, ValidationError
from gseal.gradcore import Tensor, assign_weights, load_weights, save_weights
from gseal.nets import (
    HiddenCodec,
    Message,
    ModulationSet,
    ToyUNet,
    bit_accuracy,
    decode_bits,
    hidden_decode,
    hidden_encode,
    message_to_tensor,
    modulate_input,
    modulate_mid,
    modulate_out,
    tile_block,
    unet_forward,
)


def randomize(params, rng, scale=0.05):
    # stand-in for "trained for a step": every weight moved off zero
    for p in params:
        p.data = p.data + rng.normal(0.0, scale, p.data.shape)


# ------------------------------------------------------------------- messages


def test_message_hex_msb_first():
    np.testing.assert_array_equal(Message.from_hex("0xA5").bits,
                                  [1, 0, 1, 0, 0, 1, 0, 1])


def test_message_hex_extremes():
    assert not Message.from_hex("0x0000").bits.any()
    assert Message.from_hex("0xFFFF").bits.all()


def test_message_hex_roundtrip():
    for text in ("0xA5", "0xBEEF", "0x0123456789ABCDEF"):
        assert Message.from_hex(text).hex == text


def test_message_tensor_roundtrip_all_lengths():
    rng = np.random.default_rng(0)
    for L in (16, 32, 48, 64):
        msg = Message.random(L, rng)
        back = Message(message_to_tensor(msg).data.astype(np.uint8))
        np.testing.assert_array_equal(back.bits, msg.bits)
        assert Message.from_hex(msg.hex).bits.tolist() == msg.bits.tolist()


def test_message_rejects_garbage():
    with pytest.raises(ValidationError):
        Message.from_hex("A5")
    with pytest.raises(ValidationError):
        Message.from_hex("0xZZ")
    with pytest.raises(ValidationError):
        Message(np.array([1, 0, 1]))  # not a multiple of 4
    with pytest.raises(ValidationError):
        Message(np.array([0, 2, 0, 1]))


# ----------------------------------------------------------------- tile_block


def test_tile_block_identity():
    e = Tensor(np.random.default_rng(1).normal(size=(4, 8, 8)))
    out = tile_block(e, 8, 8, 4)
    np.testing.assert_array_equal(out.data, e.data)


def test_tile_block_constant():
    out = tile_block(Tensor(np.full((2, 8, 8), 3.25)), 32, 24, 5)
    assert out.shape == (5, 32, 24)
    assert np.all(out.data == 3.25)


def test_tile_block_channel_cycle():
    e = Tensor(np.random.default_rng(2).normal(size=(4, 8, 8)))
    out = tile_block(e, 16, 16, 9)
    for i in range(9):
        np.testing.assert_array_equal(out.data[i, :8, :8], e.data[i % 4])
        np.testing.assert_array_equal(out.data[i, 8:, 8:], e.data[i % 4])


def test_tile_block_rejects_indivisible():
    e = Tensor(np.zeros((2, 8, 8)))
    with pytest.raises(ShapeError):
        tile_block(e, 20, 16, 2)
    with pytest.raises(ShapeError):
        tile_block(Tensor(np.zeros((2, 4, 4))), 16, 16, 2)


def test_tile_block_gradient_counts_tiles():
    e = Tensor(np.random.default_rng(3).normal(size=(3, 8, 8)), requires_grad=True)
    tile_block(e, 16, 24, 7).sum().backward()
    # channels 0..2 appear 3,2,2 times in the 7-channel cycle; 2x3 tiles each
    counts = np.array([3.0, 2.0, 2.0]) * 6
    np.testing.assert_allclose(e.grad, counts[:, None, None] * np.ones((3, 8, 8)))


# ------------------------------------------------------------- bit modulation


def test_modulation_residual_zero_at_init():
    mods = ModulationSet(16)
    m = Message.from_hex("0xBEEF")
    for block in (mods.b_in, mods.b_mid, mods.b_out):
        assert np.all(block(m).data == 0.0)


def test_modulate_identity_at_init():
    mods = ModulationSet(16)
    m = Message.from_hex("0xBEEF")
    z = Tensor(np.random.default_rng(4).normal(size=(2, 12, 64, 64)))
    np.testing.assert_array_equal(modulate_input(z, m, mods).data, z.data)
    h = Tensor(np.random.default_rng(5).normal(size=(1, 128, 8, 8)))
    np.testing.assert_array_equal(modulate_mid(h, m, mods).data, h.data)


def test_modulate_zero_coefficient_is_identity():
    rng = np.random.default_rng(6)
    mods = ModulationSet(16)
    randomize(mods.block_params(), rng)
    mods.alpha.data = np.float64(0.0)
    m = Message.random(16, rng)
    z = Tensor(rng.normal(size=(1, 12, 16, 16)))
    np.testing.assert_array_equal(modulate_input(z, m, mods).data, z.data)


def test_modulate_linear_in_coefficient():
    rng = np.random.default_rng(7)
    mods = ModulationSet(16)
    randomize(mods.block_params(), rng)
    m = Message.random(16, rng)
    z = Tensor(rng.normal(size=(1, 12, 16, 16)))
    mods.alpha.data = np.float64(0.2)
    d1 = modulate_input(z, m, mods).data - z.data
    mods.alpha.data = np.float64(0.6)
    d3 = modulate_input(z, m, mods).data - z.data
    np.testing.assert_allclose(d3, 3.0 * d1, atol=1e-12)


def test_modulate_out_perturbation_norm():
    rng = np.random.default_rng(8)
    mods = ModulationSet(16)
    randomize(mods.block_params(), rng)
    gamma = 0.37
    mods.gamma.data = np.float64(gamma)
    m = Message.random(16, rng)
    h = Tensor(rng.normal(size=(1, 32, 32, 32)))
    field = tile_block(mods.b_out(m), 32, 32, 32).data
    delta = modulate_out(h, m, mods).data - h.data
    assert np.linalg.norm(delta) == pytest.approx(gamma * np.linalg.norm(field), rel=1e-12)


def test_coefficients_start_at_point_one():
    mods = ModulationSet(16)
    assert float(mods.alpha.data) == 0.1
    assert float(mods.beta.data) == 0.1
    assert float(mods.gamma.data) == 0.1


# ------------------------------------------------------------------ generator


def test_unet_output_shape():
    gen = ToyUNet(seed=0)
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (12, 64, 64)))
    assert unet_forward(gen, x).shape == (14, 32, 32)
    xb = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 12, 64, 64)))
    assert unet_forward(gen, xb).shape == (3, 14, 32, 32)


def test_unet_rejects_bad_input():
    gen = ToyUNet(seed=0)
    with pytest.raises(ShapeError):
        unet_forward(gen, Tensor(np.zeros((3, 64, 64))))
    with pytest.raises(ShapeError):
        unet_forward(gen, Tensor(np.zeros((12, 60, 64))))
    with pytest.raises(ValidationError):
        unet_forward(gen, Tensor(np.zeros((12, 64, 64))), sites=("input", "bogus"))


def test_unet_watermark_off_equivalence():
    gen = ToyUNet(seed=1)
    mods = ModulationSet(16)
    rng = np.random.default_rng(9)
    randomize(mods.block_params(), rng)
    for c in mods.coeff_params():
        c.data = np.float64(0.0)
    m = Message.random(16, rng)
    x = Tensor(rng.uniform(0, 1, (12, 64, 64)))
    clean = unet_forward(gen, x)
    off = unet_forward(gen, x, m=m, mods=mods)
    np.testing.assert_array_equal(clean.data, off.data)


def test_unet_identity_at_fresh_init():
    gen = ToyUNet(seed=2)
    mods = ModulationSet(16)
    m = Message.from_hex("0x1234")
    x = Tensor(np.random.default_rng(10).uniform(0, 1, (12, 64, 64)))
    np.testing.assert_array_equal(unet_forward(gen, x).data,
                                  unet_forward(gen, x, m=m, mods=mods).data)


def test_unet_sites_take_effect_independently():
    gen = ToyUNet(seed=3)
    rng = np.random.default_rng(11)
    mods = ModulationSet(16)
    randomize(mods.block_params(), rng)
    m = Message.random(16, rng)
    x = Tensor(rng.uniform(0, 1, (12, 64, 64)))
    clean = unet_forward(gen, x).data
    for site in ("input", "mid", "out"):
        marked = unet_forward(gen, x, m=m, mods=mods, sites=(site,)).data
        assert not np.array_equal(marked, clean), site


def test_unet_deterministic_construction():
    a, b = ToyUNet(seed=5), ToyUNet(seed=5)
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_gradients_reach_all_modulation_params():
    # "one step of training" stand-in: weights bumped off zero so every
    # path through the blocks is live
    gen = ToyUNet(seed=4)
    mods = ModulationSet(16)
    rng = np.random.default_rng(12)
    randomize(mods.block_params(), rng)
    for p in mods.params():
        p.requires_grad = True
    m = Message.random(16, rng)
    x = Tensor(rng.uniform(0, 1, (12, 64, 64)))
    out = unet_forward(gen, x, m=m, mods=mods)
    (out * out).sum().backward()
    for p in mods.params():
        assert p.grad is not None and np.any(p.grad != 0.0), p.name


# -------------------------------------------------------------- message codec


def test_decoder_logits_shape_and_resize():
    codec = HiddenCodec(16, seed=0)
    one = Tensor(np.random.default_rng(0).uniform(0, 1, (3, 32, 32)))
    assert hidden_decode(one, codec).shape == (16,)
    batch = Tensor(np.random.default_rng(1).uniform(0, 1, (5, 3, 64, 64)))
    assert hidden_decode(batch, codec).shape == (5, 16)


def test_decode_bits_thresholds_and_averages():
    np.testing.assert_array_equal(decode_bits(np.array([2.0, -3.0])), [1, 0])
    np.testing.assert_array_equal(
        decode_bits(np.array([[1.0, 1.0], [-3.0, 1.0]])), [0, 1])


def test_untrained_decoder_is_chance_level():
    codec = HiddenCodec(16, seed=3)
    rng = np.random.default_rng(13)
    accs = []
    for _ in range(100):
        msg = Message.random(16, rng)
        img = Tensor(rng.uniform(0, 1, (3, 32, 32)))
        bits = decode_bits(hidden_decode(img, codec))
        accs.append(bit_accuracy(bits, msg))
    assert abs(np.mean(accs) - 0.5) <= 0.1


def test_encoder_writes_message_dependent_residual_at_init():
    # live carrier from step 0; a zero-init head stalls joint pretraining
    codec = HiddenCodec(16, seed=1)
    img = Tensor(np.random.default_rng(2).uniform(0, 1, (3, 32, 32)))
    a = hidden_encode(img, Message.from_hex("0xBEEF"), codec)
    b = hidden_encode(img, Message.from_hex("0x1234"), codec)
    assert np.abs(a.data - img.data).max() > 1e-4
    assert np.abs(a.data - b.data).max() > 1e-6
    assert np.abs(a.data - img.data).max() <= 0.1 + 1e-12


def test_encoder_residual_bound():
    codec = HiddenCodec(16, seed=2)
    rng = np.random.default_rng(14)
    randomize(codec.encoder_params(), rng, scale=2.0)  # force saturation
    img = Tensor(rng.uniform(0, 1, (3, 32, 32)))
    out = hidden_encode(img, Message.random(16, rng), codec)
    assert np.abs(out.data - img.data).max() <= 0.1 + 1e-12


def test_encoder_gradients_flow():
    codec = HiddenCodec(16, seed=4)
    rng = np.random.default_rng(15)
    randomize(codec.encoder_params(), rng)
    for p in codec.encoder_params():
        p.requires_grad = True
    img = Tensor(rng.uniform(0, 1, (4, 3, 32, 32)))
    out = hidden_encode(img, Message.random(16, rng), codec)
    (out * out).sum().backward()
    for p in codec.encoder_params():
        assert p.grad is not None and np.any(p.grad != 0.0), p.name


def test_bit_accuracy_values():
    msg = Message.from_hex("0xF0")
    assert bit_accuracy(msg.bits.copy(), msg) == 1.0
    flipped = msg.bits.copy()
    flipped[0] ^= 1
    assert bit_accuracy(flipped, msg) == pytest.approx(7 / 8)
    with pytest.raises(ShapeError):
        bit_accuracy(np.zeros(4, dtype=np.uint8), msg)


# ----------------------------------------------------------------- checkpoint


def test_checkpoint_roundtrip_restores_forward(tmp_path):
    gen = ToyUNet(seed=6)
    mods = ModulationSet(16)
    codec = HiddenCodec(16, seed=7)
    rng = np.random.default_rng(16)
    randomize(mods.block_params(), rng)
    everything = gen.params() + mods.params() + codec.params()
    path = tmp_path / "nets.gswt"
    save_weights(path, everything)

    gen2 = ToyUNet(seed=99)   # different init, then overwritten
    mods2 = ModulationSet(16)
    codec2 = HiddenCodec(16, seed=99)
    assign_weights(gen2.params() + mods2.params() + codec2.params(),
                   load_weights(path))

    m = Message.random(16, rng)
    x = Tensor(rng.uniform(0, 1, (12, 64, 64)))
    np.testing.assert_array_equal(
        unet_forward(gen, x, m=m, mods=mods).data,
        unet_forward(gen2, x, m=m, mods=mods2).data)
    img = Tensor(rng.uniform(0, 1, (3, 32, 32)))
    np.testing.assert_array_equal(hidden_decode(img, codec).data,
                                  hidden_decode(img, codec2).data)
