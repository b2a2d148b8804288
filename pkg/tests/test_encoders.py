"""Vocabulary, tokenization, and encoder behavior tests."""

import math

import numpy as np
import pytest

from promptseg import autodiff as ad
from promptseg.autodiff import Adam, AutodiffError, ShapeError, Tensor, backward, reset_tape
from promptseg.encoders import (
    PAD_ID,
    PAD_TOKEN,
    UNK_ID,
    UNK_TOKEN,
    EncoderPair,
    ImageEncoder,
    PatchConv3d,
    PatchDeconv3d,
    TextEncoder,
    Vocab,
    tokenize,
)

NORM_TOL = 1e-12


def _rng(seed):
    return np.random.default_rng(seed)


def _pair(seed=0, vocab_size=16, **kw):
    return EncoderPair(vocab_size, (_rng(seed), _rng(seed + 1)), **kw)


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------

def test_vocab_reserves_pad_and_unk():
    v = Vocab.build(["liver normal"], size=8)
    assert v.words[PAD_ID] == PAD_TOKEN and v.words[UNK_ID] == UNK_TOKEN


def test_vocab_orders_by_frequency_then_lexicographic():
    v = Vocab.build(["b b a a c", "b"], size=8)
    assert v.words[2:] == ["b", "a", "c"]  # b:3, then a:2, c:1


def test_vocab_respects_size_budget():
    v = Vocab.build(["a b c d e f g h"], size=5)
    assert len(v) == 5  # PAD, UNK, 3 words


def test_vocab_roundtrips_through_file(tmp_path):
    v = Vocab.build(["liver spleen kidney liver"], size=16)
    p = tmp_path / "vocab.txt"
    v.save(p)
    assert Vocab.load(p).words == v.words


def test_vocab_rejects_missing_reserved_rows():
    with pytest.raises(ValueError):
        Vocab(["liver", "spleen"])


def test_tokenize_known_words():
    v = Vocab.build(["liver is normal"], size=16)
    ids = tokenize("liver is normal", v)
    assert ids == [v.index["liver"], v.index["is"], v.index["normal"]]


def test_tokenize_empty_string_gives_empty_sequence():
    v = Vocab.build(["liver"], size=8)
    assert tokenize("", v) == []


def test_tokenize_oov_maps_to_unk():
    v = Vocab.build(["liver is normal"], size=16)
    ids = tokenize("liver looks normal", v)
    assert ids[1] == UNK_ID and ids[0] != UNK_ID


def test_tokenize_truncates_to_max_len():
    v = Vocab.build(["a b c"], size=8)
    assert len(tokenize("a " * 100, v, max_len=64)) == 64


def test_tokenize_is_case_and_spacing_insensitive():
    v = Vocab.build(["liver is normal"], size=16)
    assert tokenize("  LIVER   is\nnormal ", v) == tokenize("liver is normal", v)


# ---------------------------------------------------------------------------
# Patch conv / deconv against brute-force loops
# ---------------------------------------------------------------------------

def test_patch_conv_matches_naive_convolution_loops():
    rng = _rng(3)
    conv = PatchConv3d(rng, in_ch=2, out_ch=3, name="t")
    x = rng.normal(size=(2, 4, 4, 6))
    out = conv(Tensor(x)).data
    w, b = conv.w.data, conv.b.data
    expected = np.zeros((3, 2, 2, 3))
    for co in range(3):
        for i in range(2):
            for j in range(2):
                for k in range(3):
                    acc = b[co]
                    for ci in range(2):
                        for a in range(2):
                            for b2 in range(2):
                                for c2 in range(2):
                                    acc += x[ci, 2 * i + a, 2 * j + b2, 2 * k + c2] * \
                                        w[ci * 8 + a * 4 + b2 * 2 + c2, co]
                    expected[co, i, j, k] = acc
    assert np.allclose(out, expected, atol=1e-12, rtol=0)


def test_patch_deconv_matches_naive_scatter_loops():
    rng = _rng(4)
    deconv = PatchDeconv3d(rng, in_ch=3, out_ch=2, name="t")
    x = rng.normal(size=(3, 2, 2, 2))
    out = deconv(Tensor(x)).data
    w, b = deconv.w.data, deconv.b.data
    expected = np.zeros((2, 4, 4, 4))
    for co in range(2):
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    for a in range(2):
                        for b2 in range(2):
                            for c2 in range(2):
                                off = co * 8 + a * 4 + b2 * 2 + c2
                                acc = b[off]
                                for ci in range(3):
                                    acc += x[ci, i, j, k] * w[ci, off]
                                expected[co, 2 * i + a, 2 * j + b2, 2 * k + c2] = acc
    assert np.allclose(out, expected, atol=1e-12, rtol=0)


def test_deconv_inverts_conv_spatial_shape():
    rng = _rng(5)
    conv = PatchConv3d(rng, 1, 4, "c")
    deconv = PatchDeconv3d(rng, 4, 1, "d")
    x = Tensor(rng.normal(size=(1, 8, 8, 8)))
    assert deconv(conv(x)).shape == (1, 8, 8, 8)


@pytest.mark.parametrize("seed", range(3))
def test_conv_deconv_composite_gradcheck(seed):
    rng = _rng(seed)
    conv = PatchConv3d(rng, 1, 2, "c")
    deconv = PatchDeconv3d(rng, 2, 1, "d")
    x = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 4, 4, 4)))

    def fn(x, cw, cb, dw, db):
        return ad.mul(deconv(conv(x)), w).sum()

    err = ad.check_gradients(fn, [x, conv.w, conv.b, deconv.w, deconv.b], step=1e-6)
    assert err <= 1e-6


# ---------------------------------------------------------------------------
# Image encoder
# ---------------------------------------------------------------------------

def test_image_embedding_is_unit_norm():
    enc = ImageEncoder(_rng(0), volume_shape=(8, 8, 8))
    vol = _rng(1).uniform(0, 1, size=(8, 8, 8))
    out = enc.encode(vol)
    assert abs(np.linalg.norm(out.global_embedding.data) - 1.0) < NORM_TOL


def test_image_grid_extents_are_input_over_stride_product():
    enc = ImageEncoder(_rng(0), volume_shape=(32, 32, 32), grid_channels=32)
    out = enc.encode(_rng(1).uniform(0, 1, size=(32, 32, 32)))
    assert out.feature_grid.shape == (32, 8, 8, 8)


def test_identical_volumes_encode_identically():
    enc = ImageEncoder(_rng(0), volume_shape=(8, 8, 8))
    vol = _rng(1).uniform(0, 1, size=(8, 8, 8))
    a = enc.encode(vol.copy()).global_embedding.data
    b = enc.encode(vol.copy()).global_embedding.data
    assert np.array_equal(a, b)


def test_image_encoder_rejects_wrong_shape():
    enc = ImageEncoder(_rng(0), volume_shape=(8, 8, 8))
    with pytest.raises(ShapeError):
        enc.encode(np.zeros((8, 8, 4)))


def test_zero_volume_with_zero_biases_is_degenerate_and_fatal():
    # linearity forces a zero grid, and a zero vector cannot be normalized
    enc = ImageEncoder(_rng(0), volume_shape=(8, 8, 8))
    for p in enc.params():
        if p.name.endswith(".b"):
            p.data[:] = 0.0
    with pytest.raises(AutodiffError):
        enc.encode(np.zeros((8, 8, 8)))


def test_different_seeds_give_different_image_embeddings():
    vol = _rng(9).uniform(0, 1, size=(8, 8, 8))
    a = ImageEncoder(_rng(0), volume_shape=(8, 8, 8)).encode(vol).global_embedding.data
    b = ImageEncoder(_rng(1), volume_shape=(8, 8, 8)).encode(vol).global_embedding.data
    assert not np.allclose(a, b)


# ---------------------------------------------------------------------------
# Text encoder
# ---------------------------------------------------------------------------

def test_text_embedding_is_unit_norm_and_deterministic():
    enc = TextEncoder(_rng(0), vocab_size=16)
    a = enc.encode([3]).data
    assert abs(np.linalg.norm(a) - 1.0) < NORM_TOL
    assert np.array_equal(a, enc.encode([3]).data)


def test_text_encoder_is_order_invariant_under_mean_pooling():
    enc = TextEncoder(_rng(0), vocab_size=16)
    a = enc.encode([2, 5, 7]).data
    b = enc.encode([7, 2, 5]).data
    assert np.allclose(a, b, atol=NORM_TOL, rtol=0)


def test_text_encoder_seed_changes_embedding():
    a = TextEncoder(_rng(0), vocab_size=16).encode([2, 3]).data
    b = TextEncoder(_rng(1), vocab_size=16).encode([2, 3]).data
    assert not np.allclose(a, b)


def test_text_encoder_rejects_empty_sequence():
    enc = TextEncoder(_rng(0), vocab_size=16)
    with pytest.raises(AutodiffError):
        enc.encode([])


# ---------------------------------------------------------------------------
# Encoder pair: temperature and freezing
# ---------------------------------------------------------------------------

def test_tau_initializes_to_configured_value():
    pair = _pair(tau_init=0.07)
    assert abs(pair.tau().item() - 0.07) < NORM_TOL


def test_tau_is_clamped_to_range():
    pair = _pair()
    pair.log_tau.data = np.array(math.log(1e-6))
    assert abs(pair.tau().item() - 0.01) < 1e-12
    pair.log_tau.data = np.array(math.log(1e6))
    assert abs(pair.tau().item() - 100.0) < 1e-9


def test_freeze_image_keeps_parameters_bitwise_stable_over_steps():
    pair = _pair(volume_shape=(8, 8, 8))
    pair.set_frozen("image", True)
    before = [p.data.tobytes() for p in pair.image.params()]
    opt = Adam(pair.params(), lr=0.01)
    vol = _rng(2).uniform(0, 1, size=(8, 8, 8))
    for _ in range(10):
        reset_tape()
        opt.zero_grad()
        img = pair.image.encode(vol)
        txt = pair.text.encode([2, 3])
        loss = ad.div(ad.mul(img.global_embedding, txt).sum(), pair.tau())
        backward(loss)
        opt.step()
    after = [p.data.tobytes() for p in pair.image.params()]
    assert before == after
    # text side did move
    assert pair.log_tau.grad is not None


def test_unfreezing_lets_parameters_move():
    pair = _pair(volume_shape=(8, 8, 8))
    pair.set_frozen("image", True)
    pair.set_frozen("image", False)
    opt = Adam(pair.image.params(), lr=0.01)
    before = pair.image.conv1.w.data.copy()
    reset_tape()
    img = pair.image.encode(_rng(2).uniform(0, 1, size=(8, 8, 8)))
    backward(img.global_embedding.sum())
    opt.step()
    assert not np.array_equal(before, pair.image.conv1.w.data)


def test_freeze_all_components_blocks_every_update():
    pair = _pair(volume_shape=(8, 8, 8))
    pair.set_frozen("image", True)
    pair.set_frozen("text", True)
    before = [p.data.tobytes() for p in pair.params()]
    opt = Adam(pair.params(), lr=0.01)
    reset_tape()
    img = pair.image.encode(_rng(2).uniform(0, 1, size=(8, 8, 8)))
    txt = pair.text.encode([2, 3])
    backward(ad.div(ad.mul(img.global_embedding, txt).sum(), pair.tau()))
    opt.step()
    assert [p.data.tobytes() for p in pair.params()] == before


def test_set_frozen_rejects_unknown_component():
    with pytest.raises(ValueError):
        _pair().set_frozen("decoder", True)


def test_named_params_are_unique_and_cover_everything():
    pair = _pair()
    named = pair.named_params()
    assert len(named) == len(pair.params())
    assert "log_tau" in named


# ---------------------------------------------------------------------------
# End-to-end gradient check on a tiny encoder pair
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_tiny_encoder_pair_gradcheck(seed):
    pair = EncoderPair(
        8, (_rng(seed), _rng(seed + 50)), volume_shape=(4, 4, 4),
        mid_channels=2, grid_channels=3, hidden=4, embed_dim=5, token_dim=3)
    vol = _rng(seed + 100).uniform(0.1, 1, size=(4, 4, 4))
    ids = [2, 5]
    params = pair.params()

    def fn(*ps):
        img = pair.image.encode(vol)
        txt = pair.text.encode(ids)
        sim = ad.mul(img.global_embedding, txt).sum()
        return ad.div(sim, pair.tau())

    err = ad.check_gradients(fn, params, step=1e-6)
    assert err <= 1e-6
