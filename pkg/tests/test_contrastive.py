"""Contrastive loss oracles, sampling behavior, and toy training runs."""

import logging
import math

import numpy as np
import pytest

from promptseg import autodiff as ad
from promptseg.autodiff import Tensor, check_gradients, reset_tape
from promptseg.contrastive import (
    REPORT_FALLBACK,
    PretrainSample,
    alignment_diagnostics,
    clip_loss,
    final_loss,
    mgcl_loss,
    pretrain,
    sample_captions,
)
from promptseg.encoders import EncoderPair, Vocab

ORACLE_TOL = 1e-12


def _rng(seed):
    return np.random.default_rng(seed)


def _unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Brute-force oracles (no vectorization, independent of the implementation)
# ---------------------------------------------------------------------------

def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _clip_oracle(v, t, tau, reduction="sum"):
    n = v.shape[0]
    i2t = 0.0
    for i in range(n):
        num = math.exp(_cos(v[i], t[i]) / tau)
        den = sum(math.exp(_cos(v[i], t[j]) / tau) for j in range(n))
        i2t += -math.log(num / den)
    t2i = 0.0
    for i in range(n):
        num = math.exp(_cos(v[i], t[i]) / tau)
        den = sum(math.exp(_cos(v[j], t[i]) / tau) for j in range(n))
        t2i += -math.log(num / den)
    total = 0.5 * (i2t + t2i)
    return total / n if reduction == "mean" else total


def _mgcl_oracle(v, tg, tau, reduction="sum"):
    n, k, _ = tg.shape
    t2v = 0.0
    for i in range(n):
        for j in range(k):
            num = math.exp(_cos(v[i], tg[i, j]) / tau)
            den = sum(math.exp(_cos(v[m], tg[i, j]) / tau) for m in range(n))
            t2v += -math.log(num / den)
    v2t = 0.0
    for i in range(n):
        for j in range(k):
            num = math.exp(_cos(v[i], tg[i, j]) / tau)
            den = sum(math.exp(_cos(v[i], tg[m, j]) / tau) for m in range(n))
            v2t += -math.log(num / den)
    total = 0.5 * (t2v + v2t)
    return total / (n * k) if reduction == "mean" else total


# ---------------------------------------------------------------------------
# Caption sampling
# ---------------------------------------------------------------------------

def test_single_caption_is_repeated_k_times():
    assert sample_captions(["only one"], 3, _rng(0)) == ["only one"] * 3


def test_empty_caption_list_yields_fallback_markers():
    assert sample_captions([], 3, _rng(0)) == [REPORT_FALLBACK] * 3


def test_sampling_is_reproducible_for_fixed_seed():
    caps = [f"c{i}" for i in range(10)]
    assert sample_captions(caps, 3, _rng(42)) == sample_captions(caps, 3, _rng(42))


def test_sampling_is_uniform_over_captions():
    caps = [f"c{i}" for i in range(10)]
    rng = _rng(7)
    counts = {c: 0 for c in caps}
    draws = 100_000
    for _ in range(draws // 5):
        for c in sample_captions(caps, 5, rng):
            counts[c] += 1
    for c in caps:
        assert abs(counts[c] / draws - 0.1) <= 0.01


def test_sampling_rejects_nonpositive_k():
    with pytest.raises(ValueError):
        sample_captions(["a"], 0, _rng(0))


# ---------------------------------------------------------------------------
# Report-level loss
# ---------------------------------------------------------------------------

def test_clip_loss_single_pair_is_zero_with_warning(caplog):
    v = Tensor(_unit_rows(_rng(0), 1, 8))
    t = Tensor(_unit_rows(_rng(1), 1, 8))
    with caplog.at_level(logging.WARNING, logger="promptseg.contrastive"):
        out = clip_loss(v, t, 0.07, reduction="sum")
    assert out.item() == 0.0
    assert any("no negatives" in m for m in caplog.messages)


def test_clip_loss_on_antipodal_pairs_is_nearly_zero():
    # similarities: diagonal +1, off-diagonal -1
    v = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    t = Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    out = clip_loss(v, t, 0.07, reduction="sum")
    bound = 2 * 2 * math.log1p(math.exp(-2.0 / 0.07))
    assert 0.0 <= out.item() <= max(bound, 1e-11)


def test_clip_loss_matches_double_loop_oracle():
    rng = _rng(3)
    v = _unit_rows(rng, 4, 16)
    t = _unit_rows(rng, 4, 16)
    for tau in (0.07, 0.5, 1.0):
        for reduction in ("sum", "mean"):
            got = clip_loss(Tensor(v), Tensor(t), tau, reduction=reduction).item()
            want = _clip_oracle(v, t, tau, reduction)
            assert abs(got - want) < ORACLE_TOL


def test_clip_loss_is_invariant_under_batch_permutation():
    rng = _rng(4)
    v = _unit_rows(rng, 5, 8)
    t = _unit_rows(rng, 5, 8)
    perm = rng.permutation(5)
    a = clip_loss(Tensor(v), Tensor(t), 0.2, reduction="sum").item()
    b = clip_loss(Tensor(v[perm]), Tensor(t[perm]), 0.2, reduction="sum").item()
    assert abs(a - b) < ORACLE_TOL


def test_clip_loss_rejects_mismatched_batches():
    with pytest.raises(ad.ShapeError):
        clip_loss(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 4))), 0.1)


# ---------------------------------------------------------------------------
# Caption-level loss
# ---------------------------------------------------------------------------

def test_mgcl_matches_triple_loop_oracle_on_small_fixture():
    rng = _rng(5)
    v = _unit_rows(rng, 2, 6)
    tg = rng.normal(size=(2, 2, 6))
    tg /= np.linalg.norm(tg, axis=2, keepdims=True)
    for reduction in ("sum", "mean"):
        got = mgcl_loss(Tensor(v), Tensor(tg), 0.3, reduction=reduction).item()
        want = _mgcl_oracle(v, tg, 0.3, reduction)
        assert abs(got - want) < ORACLE_TOL


def test_mgcl_matches_oracle_on_4x4xk3_fixture():
    rng = _rng(6)
    v = _unit_rows(rng, 4, 16)
    tg = rng.normal(size=(4, 3, 16))
    tg /= np.linalg.norm(tg, axis=2, keepdims=True)
    got = mgcl_loss(Tensor(v), Tensor(tg), 0.07, reduction="sum").item()
    want = _mgcl_oracle(v, tg, 0.07, "sum")
    assert abs(got - want) < ORACLE_TOL


def test_mgcl_with_k1_report_captions_equals_clip_loss():
    rng = _rng(7)
    v = _unit_rows(rng, 4, 8)
    t = _unit_rows(rng, 4, 8)
    for reduction in ("sum", "mean"):
        a = clip_loss(Tensor(v), Tensor(t), 0.07, reduction=reduction).item()
        b = mgcl_loss(Tensor(v), Tensor(t.reshape(4, 1, 8)), 0.07,
                      reduction=reduction).item()
        assert abs(a - b) < ORACLE_TOL


def test_mgcl_duplicate_captions_floor_at_log2_per_anchor():
    rng = _rng(8)
    v = _unit_rows(rng, 2, 8)
    shared = _unit_rows(rng, 1, 8)[0]
    tg = np.stack([shared, shared]).reshape(2, 1, 8)
    out = mgcl_loss(Tensor(v), Tensor(tg), 0.07, reduction="mean").item()
    assert out >= math.log(2.0) - 1e-9


def test_mgcl_is_invariant_under_batch_permutation():
    rng = _rng(9)
    v = _unit_rows(rng, 4, 8)
    tg = rng.normal(size=(4, 3, 8))
    tg /= np.linalg.norm(tg, axis=2, keepdims=True)
    perm = rng.permutation(4)
    a = mgcl_loss(Tensor(v), Tensor(tg), 0.2, reduction="sum").item()
    b = mgcl_loss(Tensor(v[perm]), Tensor(tg[perm]), 0.2, reduction="sum").item()
    assert abs(a - b) < 1e-10


def test_mgcl_rejects_mismatched_shapes():
    with pytest.raises(ad.ShapeError):
        mgcl_loss(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 2, 4))), 0.1)
    with pytest.raises(ad.ShapeError):
        mgcl_loss(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 2, 5))), 0.1)


def test_mgcl_multi_positive_variant_matches_its_own_oracle():
    rng = _rng(10)
    v = _unit_rows(rng, 3, 8)
    tg = rng.normal(size=(3, 2, 8))
    tg /= np.linalg.norm(tg, axis=2, keepdims=True)
    tau = 0.3
    n, k, _ = tg.shape
    t2v = 0.0
    for i in range(n):
        for j in range(k):
            num = math.exp(_cos(v[i], tg[i, j]) / tau)
            den = sum(math.exp(_cos(v[m], tg[i, j]) / tau) for m in range(n))
            t2v += -math.log(num / den)
    v2t = 0.0
    for i in range(n):
        for j in range(k):
            num = math.exp(_cos(v[i], tg[i, j]) / tau)
            den = sum(math.exp(_cos(v[i], tg[m, jj]) / tau)
                      for m in range(n) for jj in range(k))
            v2t += -math.log(num / den)
    want = 0.5 * (t2v + v2t)
    got = mgcl_loss(Tensor(v), Tensor(tg), tau, reduction="sum",
                    multi_positive=True).item()
    assert abs(got - want) < ORACLE_TOL


# ---------------------------------------------------------------------------
# Loss combination
# ---------------------------------------------------------------------------

def test_final_loss_default_weights_sum_components():
    out = final_loss(Tensor(0.5), Tensor(0.7), (1.0, 1.0))
    assert abs(out.item() - 1.2) < ORACLE_TOL


def test_final_loss_weight_combinations():
    clip, mgcl = Tensor(0.5), Tensor(0.7)
    assert abs(final_loss(clip, mgcl, (1.0, 0.0)).item() - 0.5) < ORACLE_TOL
    assert abs(final_loss(clip, mgcl, (0.0, 1.0)).item() - 0.7) < ORACLE_TOL


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_clip_loss_gradcheck_including_temperature(seed):
    rng = _rng(seed)
    v = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    t = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    log_tau = Tensor(math.log(0.5), requires_grad=True)

    def fn(v, t, log_tau):
        return clip_loss(v, t, ad.exp(log_tau), reduction="sum")

    assert check_gradients(fn, [v, t, log_tau], step=1e-6) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_mgcl_loss_gradcheck_including_temperature(seed):
    rng = _rng(seed)
    v = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    tg = Tensor(rng.normal(size=(3, 2, 5)), requires_grad=True)
    log_tau = Tensor(math.log(0.5), requires_grad=True)

    def fn(v, tg, log_tau):
        return mgcl_loss(v, tg, ad.exp(log_tau), reduction="sum")

    assert check_gradients(fn, [v, tg, log_tau], step=1e-6) <= 1e-6


@pytest.mark.parametrize("multi", [False, True])
def test_mgcl_variants_gradcheck(multi):
    rng = _rng(11)
    v = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    tg = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)

    def fn(v, tg):
        return mgcl_loss(v, tg, 0.4, reduction="mean", multi_positive=multi)

    assert check_gradients(fn, [v, tg], step=1e-6) <= 1e-6


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def test_alignment_diagnostics_on_hand_built_pairs():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    t = np.array([[1.0, 0.0], [1.0, 0.0]])
    paired, unpaired = alignment_diagnostics(v, t)
    assert abs(paired - 0.5) < ORACLE_TOL   # cos pairs: 1 and 0
    assert abs(unpaired - 0.5) < ORACLE_TOL


# ---------------------------------------------------------------------------
# Training behavior
# ---------------------------------------------------------------------------

def _toy_setup(num=2, seed=0, volume_shape=(8, 8, 8)):
    reports = ["bright mass in the upper field", "dark hollow in the lower field",
               "speckled ring at the center", "uniform haze throughout"]
    rng = _rng(seed)
    samples = []
    for i in range(num):
        vol = rng.uniform(0, 0.2, size=volume_shape)
        if i % 2 == 0:
            vol[2:6, 2:6, 2:6] += 0.7
        samples.append(PretrainSample(
            volume=np.clip(vol, 0, 1),
            report_text=reports[i % len(reports)],
            granular_captions=[reports[i % len(reports)]],
        ))
    vocab = Vocab.build([s.report_text for s in samples], size=64)
    pair = EncoderPair(len(vocab), (_rng(seed + 1), _rng(seed + 2)),
                       volume_shape=volume_shape, mid_channels=4,
                       grid_channels=8, hidden=16, embed_dim=16, token_dim=8)
    return samples, vocab, pair


def _cfg(**overrides):
    cfg = {
        "batch_size": 2,
        "epochs": 100,
        "lr": 0.01,
        "k_captions": 3,
        "loss_weights": [1.0, 1.0],
        "stage0": False,
        "stage0_epochs": 0,
        "stage0_lr": 0.003,
        "lock_image_encoder": True,
        "mgcl_multi_positive": False,
        "max_len": 16,
    }
    cfg.update(overrides)
    return cfg


def test_pretrain_separates_paired_from_unpaired_cosines():
    samples, vocab, pair = _toy_setup(num=2)
    _, records = pretrain(samples, vocab, _cfg(epochs=200), seed=0, pair=pair)
    assert len(records) == 200
    last = records[-1]
    assert last["paired_cos"] - last["unpaired_cos"] >= 0.2


def test_pretrain_with_locked_image_encoder_keeps_theta_bitwise():
    samples, vocab, pair = _toy_setup(num=4)
    before = [p.data.tobytes() for p in pair.image.params()]
    pretrain(samples, vocab, _cfg(epochs=5), seed=0, pair=pair)
    assert [p.data.tobytes() for p in pair.image.params()] == before


def test_pretrain_zero_epochs_keeps_all_parameters_at_init():
    samples, vocab, pair = _toy_setup(num=2)
    before = {k: v.data.copy() for k, v in pair.named_params().items()}
    pretrain(samples, vocab, _cfg(epochs=0), seed=0, pair=pair)
    for name, tensor in pair.named_params().items():
        assert np.array_equal(tensor.data, before[name]), name


def test_pretrain_drops_trailing_singleton_batch():
    samples, vocab, pair = _toy_setup(num=3)
    _, records = pretrain(samples, vocab, _cfg(epochs=4, batch_size=2),
                          seed=0, pair=pair)
    # 3 samples, batch 2 -> one usable batch per epoch, singleton dropped
    assert len(records) == 4


def test_pretrain_loss_log_has_required_fields():
    samples, vocab, pair = _toy_setup(num=2)
    _, records = pretrain(samples, vocab, _cfg(epochs=2), seed=0, pair=pair)
    for rec in records:
        assert set(rec) == {"step", "clip", "mgcl", "total", "paired_cos",
                            "unpaired_cos"}


def test_pretrain_loss_decreases_over_first_50_steps_smoothed():
    samples, vocab, pair = _toy_setup(num=4)
    _, records = pretrain(samples, vocab, _cfg(epochs=25, batch_size=4, lr=0.01),
                          seed=0, pair=pair)
    losses = [r["total"] for r in records[:50]]
    smoothed = [float(np.mean(losses[i:i + 10])) for i in range(len(losses) - 9)]
    assert all(b < a for a, b in zip(smoothed, smoothed[1:]))


def test_pretrain_is_deterministic_for_fixed_seed():
    samples, vocab, pair_a = _toy_setup(num=4)
    _, rec_a = pretrain(samples, vocab, _cfg(epochs=5), seed=3, pair=pair_a)
    samples_b, vocab_b, pair_b = _toy_setup(num=4)
    _, rec_b = pretrain(samples_b, vocab_b, _cfg(epochs=5), seed=3, pair=pair_b)
    assert rec_a == rec_b


def test_pretrain_empty_dataset_is_fatal():
    _, vocab, pair = _toy_setup(num=2)
    with pytest.raises(ValueError):
        pretrain([], vocab, _cfg(), seed=0, pair=pair)


def test_pretrain_sample_requires_report_text():
    with pytest.raises(ValueError):
        PretrainSample(volume=np.zeros((4, 4, 4)), report_text="")


def test_stage0_changes_image_encoder_and_is_discarded():
    samples, vocab, pair = _toy_setup(num=4)
    for s in samples:
        s.label_map = (s.volume > 0.5).astype(np.int16)
    before = [p.data.copy() for p in pair.image.params()]
    pretrain(samples, vocab,
             _cfg(epochs=0, stage0=True, stage0_epochs=2, stage0_channels=4),
             seed=0, pair=pair, stage0_labels=[1])
    moved = any(not np.array_equal(a, p.data)
                for a, p in zip(before, pair.image.params()))
    assert moved
    # no stage-0 leftovers in the pair's parameter set
    assert all(not n.startswith("stage0") for n in pair.named_params())


def test_stage0_without_labels_is_fatal():
    samples, vocab, pair = _toy_setup(num=2)
    with pytest.raises(ValueError):
        pretrain(samples, vocab, _cfg(stage0=True, stage0_epochs=1),
                 seed=0, pair=pair)
