"""Contrastive pretraining: report-level and caption-level alignment.

The report-level loss is bidirectional InfoNCE over an image/report batch.
The caption-level loss pairs each image with K captions sampled uniformly
WITH replacement from its granular caption list; its image-to-caption
direction anchors each caption against all images in the batch, and the
text-side direction anchors each image against the batch's captions one
sampling slot at a time (exactly one positive per anchor). A multi-positive
variant of the text-side direction is available behind a flag. Training is
two-stage: an optional segmentation warm-up of the image encoder on phantom
labels, then contrastive alignment with the image encoder locked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, cosine_similarity_matrix, info_nce, reset_tape
from .config import rng_for
from .encoders import EncoderPair, tokenize

log = logging.getLogger(__name__)

__all__ = [
    "REPORT_FALLBACK",
    "PretrainSample",
    "sample_captions",
    "clip_loss",
    "mgcl_loss",
    "final_loss",
    "alignment_diagnostics",
    "pretrain",
]

# Directive value: the trainer substitutes the sample's full report text.
REPORT_FALLBACK = "<report-fallback>"


@dataclass
class PretrainSample:
    volume: np.ndarray
    report_text: str
    granular_captions: list = field(default_factory=list)
    # labels are only consumed by the stage-0 segmentation warm-up
    label_map: np.ndarray | None = None

    def __post_init__(self):
        if not self.report_text:
            raise ValueError("report_text must be non-empty")


def sample_captions(captions, k: int, rng: np.random.Generator) -> list:
    """K uniform draws WITH replacement; empty list yields K fallback markers."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not captions:
        return [REPORT_FALLBACK] * k
    idx = rng.integers(0, len(captions), size=k)
    return [captions[i] for i in idx]


def clip_loss(v: Tensor, t: Tensor, tau, reduction: str = "mean") -> Tensor:
    """Bidirectional InfoNCE with diagonal positives over paired batches."""
    if v.shape != t.shape:
        raise ad.ShapeError(f"paired batches must match: {v.shape} vs {t.shape}")
    n = v.shape[0]
    if n < 2:
        log.warning("contrastive batch of size %d has no negatives; loss is 0", n)
    s = cosine_similarity_matrix(v, t)
    pos = [(i, i) for i in range(n)]
    i2t = info_nce(s, pos, tau, direction="row", reduction="sum")
    t2i = info_nce(s, pos, tau, direction="column", reduction="sum")
    total = ad.scale(ad.add(i2t, t2i), 0.5)
    if reduction == "mean":
        total = ad.scale(total, 1.0 / n)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def _slot_indices(n: int, k: int, j: int) -> list:
    return [i * k + j for i in range(n)]


def mgcl_loss(v: Tensor, tg: Tensor, tau, reduction: str = "mean",
              multi_positive: bool = False) -> Tensor:
    """Caption-granularity contrastive loss.

    ``tg`` holds the sampled caption embeddings, shape (N, K, d) aligned with
    the image batch ``v`` (N, d). The caption-anchored direction contrasts
    each caption against all N images. The image-anchored direction contrasts
    each image against the N captions sharing a sampling slot (one positive
    per anchor); with ``multi_positive`` it instead contrasts against all N*K
    captions with the image's own K captions as positives.
    """
    if v.data.ndim != 2 or tg.data.ndim != 3 or tg.shape[0] != v.shape[0] \
            or tg.shape[2] != v.shape[1]:
        raise ad.ShapeError(f"expected (N,d) and (N,K,d), got {v.shape} and {tg.shape}")
    n, k, d = tg.shape
    if n < 2:
        log.warning("contrastive batch of size %d has no negatives; loss is 0", n)
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    flat = ad.reshape(tg, (n * k, d))
    s = cosine_similarity_matrix(v, flat)  # (N, N*K)

    # caption-anchored: each t_{i,j} against all images
    pos = [(i, i * k + j) for i in range(n) for j in range(k)]
    t2v = info_nce(s, pos, tau, direction="column", reduction="sum")

    if multi_positive:
        # each image against all N*K captions, its own K captions positive:
        # sum_j (lse_i - z[i, i*K+j]) = K*lse_i - sum_j z[i, i*K+j]
        tau_t = tau if isinstance(tau, Tensor) else Tensor(float(tau))
        z = ad.div(s, tau_t)
        lse = ad.logsumexp(z, axis=1)
        mask = np.zeros((n, n * k))
        for i in range(n):
            for j in range(k):
                mask[i, i * k + j] = 1.0
        picked = ad.tensor_sum(ad.mul(z, Tensor(mask)))
        v2t = ad.add(ad.scale(ad.tensor_sum(lse), float(k)), ad.neg(picked))
    else:
        # slot-wise: image i against the N captions occupying slot j
        terms = []
        diag = [(i, i) for i in range(n)]
        for j in range(k):
            slot = ad.gather_rows(flat, _slot_indices(n, k, j))
            s_j = cosine_similarity_matrix(v, slot)
            terms.append(info_nce(s_j, diag, tau, direction="row", reduction="sum"))
        v2t = terms[0]
        for term in terms[1:]:
            v2t = ad.add(v2t, term)

    total = ad.scale(ad.add(t2v, v2t), 0.5)
    if reduction == "mean":
        total = ad.scale(total, 1.0 / (n * k))
    return total


def final_loss(clip: Tensor, mgcl: Tensor, weights=(1.0, 1.0)) -> Tensor:
    """Weighted combination; (1,0) is the report-only ablation."""
    w_clip, w_mgcl = float(weights[0]), float(weights[1])
    return ad.add(ad.scale(clip, w_clip), ad.scale(mgcl, w_mgcl))


def alignment_diagnostics(v: np.ndarray, t: np.ndarray) -> tuple:
    """Mean paired vs mean unpaired cosine over already-normalized rows."""
    s = v @ t.T
    n = s.shape[0]
    paired = float(np.trace(s) / n)
    if n < 2:
        return paired, 0.0
    unpaired = float((s.sum() - np.trace(s)) / (n * (n - 1)))
    return paired, unpaired


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batches(order, batch_size: int):
    """Consecutive index batches; a trailing singleton is dropped (no negatives)."""
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) >= 2:
            yield chunk


def _encode_text_rows(pair: EncoderPair, vocab, texts, max_len: int) -> Tensor:
    rows = []
    for text in texts:
        ids = tokenize(text, vocab, max_len)
        if not ids:
            ids = [1]  # lone UNK keeps degenerate prompts encodable
        rows.append(ad.reshape(pair.text.encode(ids), (1, pair.text.embed_dim)))
    return ad.concat(rows, axis=0)


def _stage0_segmentation_warmup(pair: EncoderPair, samples, labels, cfg, seed: int):
    """Train the image encoder through a throwaway mask decoder on the
    phantom label maps, then discard everything but the encoder."""
    from .segmentation import Decoder, dice_loss_per_row  # deferred: avoids import cycle

    channels = cfg.get("stage0_channels", 8)
    rng = rng_for(seed, "stage0")
    decoder = Decoder(rng_for(seed, "stage0-decoder"),
                      in_ch=pair.image.grid_channels, out_ch=channels)
    queries = ad.parameter(
        ad.uniform_init(rng_for(seed, "stage0-queries"),
                        (len(labels), channels), channels),
        "stage0.queries")
    params = pair.image.params() + decoder.params() + [queries]
    opt = Adam(params, lr=cfg["stage0_lr"])
    volume_voxels = int(np.prod(pair.image.volume_shape))
    usable = [s for s in samples if s.label_map is not None]
    if not usable:
        raise ValueError("stage-0 warm-up requires samples with label maps")
    target_cache = {}
    for epoch in range(cfg["stage0_epochs"]):
        order = rng.permutation(len(usable))
        for batch in _batches(list(order), cfg["batch_size"]):
            reset_tape()
            opt.zero_grad()
            loss = None
            for idx in batch:
                sample = usable[idx]
                if idx not in target_cache:
                    target_cache[idx] = np.stack([
                        (sample.label_map == l).reshape(-1) for l in labels
                    ]).astype(np.float64)
                grid = pair.image.encode(sample.volume).feature_grid
                fields = decoder(grid)  # (C', D, H, W)
                flat = ad.reshape(fields, (channels, volume_voxels))
                logits = ad.matmul(queries, flat)  # (L, voxels)
                probs = ad.sigmoid(logits)
                per_label = dice_loss_per_row(probs, Tensor(target_cache[idx]))
                term = ad.tensor_mean(per_label)
                loss = term if loss is None else ad.add(loss, term)
            backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
    reset_tape()


def pretrain(samples, vocab, cfg: dict, seed: int, pair: EncoderPair,
             stage0_labels=None, log_sink=None) -> tuple:
    """Two-stage pretraining; returns (encoder pair, loss log records).

    cfg keys: batch_size, epochs, lr, k_captions, loss_weights, stage0,
    stage0_epochs, stage0_lr, stage0_channels, lock_image_encoder,
    mgcl_multi_positive, max_len. ``stage0_labels`` lists the label ids the
    warm-up decoder segments (required when stage 0 is enabled).
    """
    if not samples:
        raise ValueError("pretraining dataset is empty")

    if cfg.get("stage0") and cfg["stage0_epochs"] > 0:
        if not stage0_labels:
            raise ValueError("stage 0 is enabled but no label ids were provided")
        _stage0_segmentation_warmup(pair, samples, stage0_labels, cfg, seed)

    if cfg.get("lock_image_encoder", True):
        pair.set_frozen("image", True)

    records = []
    rng = rng_for(seed, "stage1")
    caption_rng = rng_for(seed, "stage1-captions")
    opt = Adam(pair.params(), lr=cfg["lr"])
    max_len = cfg.get("max_len", 64)
    k = cfg["k_captions"]
    step = 0
    image_locked = cfg.get("lock_image_encoder", True)
    for epoch in range(cfg["epochs"]):
        order = rng.permutation(len(samples))
        for batch in _batches(list(order), cfg["batch_size"]):
            reset_tape()
            opt.zero_grad()
            chosen = [samples[i] for i in batch]
            if image_locked:
                with ad.no_grad():
                    v_rows = [ad.reshape(pair.image.encode(s.volume).global_embedding,
                                         (1, pair.image.embed_dim)) for s in chosen]
            else:
                v_rows = [ad.reshape(pair.image.encode(s.volume).global_embedding,
                                     (1, pair.image.embed_dim)) for s in chosen]
            v = ad.concat(v_rows, axis=0)
            reports = _encode_text_rows(pair, vocab, [s.report_text for s in chosen], max_len)
            caption_texts = []
            for s in chosen:
                picks = sample_captions(s.granular_captions, k, caption_rng)
                caption_texts += [s.report_text if p == REPORT_FALLBACK else p
                                  for p in picks]
            captions = _encode_text_rows(pair, vocab, caption_texts, max_len)
            tg = ad.reshape(captions, (len(chosen), k, pair.text.embed_dim))
            tau = pair.tau()
            clip = clip_loss(v, reports, tau)
            mgcl = mgcl_loss(v, tg, tau,
                             multi_positive=cfg.get("mgcl_multi_positive", False))
            total = final_loss(clip, mgcl, cfg["loss_weights"])
            backward(total)
            opt.step()
            paired, unpaired = alignment_diagnostics(v.data, reports.data)
            record = {
                "step": step,
                "clip": float(clip.data),
                "mgcl": float(mgcl.data),
                "total": float(total.data),
                "paired_cos": paired,
                "unpaired_cos": unpaired,
            }
            records.append(record)
            if log_sink is not None:
                log_sink(record)
            step += 1
    reset_tape()
    return pair, records
