"""Prompt-conditioned mask prediction over the encoder's feature grid.

A text prompt becomes a query vector through a connector (plain MLP, or
cross-attention over the feature grid). A two-stage transposed-convolution
decoder lifts the stride-4 grid back to input resolution; the query is dotted
against every voxel's feature vector and squashed through a logistic, one
independent mask per prompt (multi-label by design: merged prompts overlap
their constituents). Fine-tuning trains connector + decoder only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, reset_tape
from .config import rng_for
from .encoders import EncoderPair, Linear, PatchDeconv3d, tokenize

log = logging.getLogger(__name__)

__all__ = [
    "Prompt",
    "PromptedMask",
    "DiceResult",
    "parse_gt_rule",
    "prompt_target",
    "load_prompt_table",
    "write_prompt_table",
    "resolve_prompt_table",
    "ConnectorMLP",
    "ConnectorCrossAttention",
    "Decoder",
    "SegModel",
    "dice_loss",
    "dice_loss_per_row",
    "dsc",
    "finetune",
    "evaluate_seen",
    "evaluate_generalization",
    "MASK_THRESHOLD",
]

MASK_THRESHOLD = 0.5


@dataclass
class Prompt:
    text: str
    gt_rule: str = "none"

    def __post_init__(self):
        if not self.text:
            raise ValueError("prompt text must be non-empty")
        parse_gt_rule(self.gt_rule)


@dataclass
class PromptedMask:
    prompt: Prompt
    probabilities: np.ndarray  # float64 grid in [0,1]
    mask: np.ndarray           # bool grid, probabilities >= threshold


@dataclass
class DiceResult:
    per_prompt: dict
    macro: float


def parse_gt_rule(rule: str):
    """Rule formats: "label:<id>", "union:<id,id,...>", "none"."""
    if rule == "none":
        return "none", []
    kind, _, rest = rule.partition(":")
    if kind not in ("label", "union") or not rest:
        raise ValueError(f"bad ground-truth rule {rule!r}")
    try:
        ids = [int(x) for x in rest.split(",")]
    except ValueError:
        raise ValueError(f"bad ground-truth rule {rule!r}") from None
    if kind == "label" and len(ids) != 1:
        raise ValueError(f"label rule must name exactly one id: {rule!r}")
    return kind, ids


def prompt_target(prompt: Prompt, label_map: np.ndarray):
    """Binary target for a prompt, or None for evaluation-only prompts."""
    kind, ids = parse_gt_rule(prompt.gt_rule)
    if kind == "none":
        return None
    return np.isin(label_map, ids)


def load_prompt_table(path) -> list:
    import json

    prompts = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            prompts.append(Prompt(text=obj["text"], gt_rule=obj.get("gt_rule", "none")))
    return prompts


def write_prompt_table(path, prompts) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps({"text": p.text, "gt_rule": p.gt_rule}) + "\n")


def resolve_prompt_table(prompts, known_labels) -> list:
    """Drop prompts whose rule references labels that do not exist."""
    known = set(int(l) for l in known_labels)
    kept = []
    for p in prompts:
        kind, ids = parse_gt_rule(p.gt_rule)
        if kind != "none" and not set(ids) <= known:
            log.warning("excluding prompt %r: rule %r references unknown labels",
                        p.text, p.gt_rule)
            continue
        kept.append(p)
    return kept


# ---------------------------------------------------------------------------
# Connectors and decoder
# ---------------------------------------------------------------------------

class ConnectorMLP:
    """text embedding (d) -> query (C'), image-independent."""

    def __init__(self, rng, embed_dim: int, hidden: int, out_dim: int):
        self.fc1 = Linear(rng, embed_dim, hidden, "connector.fc1")
        self.fc2 = Linear(rng, hidden, out_dim, "connector.fc2")

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def __call__(self, t_rows: Tensor, feature_grid=None) -> Tensor:
        return self.fc2(ad.relu(self.fc1(t_rows)))


class ConnectorCrossAttention:
    """text embedding attends over flattened grid positions, then projects.

    One query per prompt; keys/values are linear maps of the grid's per-voxel
    feature vectors; scaled dot-product attention with 1/sqrt(head_dim).
    Heads keep separate weight tensors so no tensor slicing is needed.
    """

    def __init__(self, rng, embed_dim: int, grid_channels: int, out_dim: int,
                 heads: int = 2, head_dim: int = 16):
        self.heads = heads
        self.head_dim = head_dim
        self.q_proj = [Linear(rng, embed_dim, head_dim, f"connector.q{h}")
                       for h in range(heads)]
        self.k_proj = [Linear(rng, grid_channels, head_dim, f"connector.k{h}")
                       for h in range(heads)]
        self.v_proj = [Linear(rng, grid_channels, head_dim, f"connector.v{h}")
                       for h in range(heads)]
        self.out = Linear(rng, heads * head_dim, out_dim, "connector.out")

    def params(self):
        out = []
        for layer in self.q_proj + self.k_proj + self.v_proj:
            out += layer.params()
        return out + self.out.params()

    def attention_weights(self, t_rows: Tensor, feature_grid: Tensor) -> list:
        """Per-head softmax weights, shape (num_prompts, positions) each."""
        c = feature_grid.shape[0]
        positions = ad.permute(ad.reshape(
            feature_grid, (c, int(np.prod(feature_grid.shape[1:])))), (1, 0))
        weights = []
        for h in range(self.heads):
            q = self.q_proj[h](t_rows)                      # (P, hd)
            k = self.k_proj[h](positions)                   # (V, hd)
            scores = ad.scale(ad.matmul(q, ad.permute(k, (1, 0))),
                              1.0 / np.sqrt(self.head_dim))  # (P, V)
            weights.append(ad.softmax(scores, axis=1))
        return weights

    def __call__(self, t_rows: Tensor, feature_grid: Tensor) -> Tensor:
        if feature_grid is None:
            raise ValueError("cross-attention connector needs the feature grid")
        c = feature_grid.shape[0]
        positions = ad.permute(ad.reshape(
            feature_grid, (c, int(np.prod(feature_grid.shape[1:])))), (1, 0))
        head_outputs = []
        for h, attn in enumerate(self.attention_weights(t_rows, feature_grid)):
            v = self.v_proj[h](positions)                   # (V, hd)
            head_outputs.append(ad.matmul(attn, v))         # (P, hd)
        return self.out(ad.concat(head_outputs, axis=1))    # (P, C')


class Decoder:
    """stride-4 grid -> full-resolution feature field with C' channels."""

    def __init__(self, rng, in_ch: int, out_ch: int, mid_ch: int | None = None):
        mid = mid_ch if mid_ch is not None else max(out_ch * 2, 4)
        self.up1 = PatchDeconv3d(rng, in_ch, mid, "decoder.up1")
        self.up2 = PatchDeconv3d(rng, mid, out_ch, "decoder.up2")
        self.out_ch = out_ch

    def params(self):
        return self.up1.params() + self.up2.params()

    def __call__(self, grid: Tensor) -> Tensor:
        return self.up2(ad.relu(self.up1(grid)))


# ---------------------------------------------------------------------------
# Losses and metric
# ---------------------------------------------------------------------------

def dice_loss(prob: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), differentiable in p."""
    if prob.shape != target.shape:
        raise ad.ShapeError(f"dice_loss shapes differ: {prob.shape} vs {target.shape}")
    if smooth <= 0:
        raise ValueError("smooth must be positive")
    inter = ad.tensor_sum(ad.mul(prob, target))
    num = ad.add(ad.scale(inter, 2.0), Tensor(smooth))
    den = ad.add(ad.add(ad.tensor_sum(prob), ad.tensor_sum(target)), Tensor(smooth))
    return ad.add(Tensor(1.0), ad.neg(ad.div(num, den)))


def dice_loss_per_row(probs: Tensor, targets: Tensor, smooth: float = 1.0) -> Tensor:
    """Row-wise dice losses for (P, V) prob/target matrices; returns (P,)."""
    if probs.shape != targets.shape or probs.data.ndim != 2:
        raise ad.ShapeError(f"expected matching (P, V), got {probs.shape} vs {targets.shape}")
    inter = ad.tensor_sum(ad.mul(probs, targets), axis=1)
    num = ad.add(ad.scale(inter, 2.0), Tensor(smooth))
    den = ad.add(ad.add(ad.tensor_sum(probs, axis=1), ad.tensor_sum(targets, axis=1)),
                 Tensor(smooth))
    return ad.add(Tensor(np.ones(probs.shape[0])), ad.neg(ad.div(num, den)))


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); both-empty counts as perfect agreement (1.0)."""
    if pred.shape != gt.shape:
        raise ValueError(f"dsc shapes differ: {pred.shape} vs {gt.shape}")
    a = pred.astype(bool)
    b = gt.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class SegModel:
    """Encoder pair plus trainable connector and decoder."""

    def __init__(self, pair: EncoderPair, vocab, connector: str = "mlp",
                 decoder_channels: int = 8, connector_hidden: int = 64,
                 attention_heads: int = 2, max_len: int = 64, seed: int = 0):
        self.pair = pair
        self.vocab = vocab
        self.max_len = max_len
        self.connector_mode = connector
        self.decoder_channels = decoder_channels
        d = pair.image.embed_dim
        c = pair.image.grid_channels
        if connector == "mlp":
            self.connector = ConnectorMLP(rng_for(seed, "connector"), d,
                                          connector_hidden, decoder_channels)
        elif connector == "cross_attention":
            self.connector = ConnectorCrossAttention(
                rng_for(seed, "connector"), d, c, decoder_channels,
                heads=attention_heads)
        else:
            raise ValueError(f"unknown connector mode {connector!r}")
        self.decoder = Decoder(rng_for(seed, "decoder"), c, decoder_channels)

    def groups(self) -> dict:
        pair_groups = self.pair.groups()
        return {
            "image": pair_groups["image"],
            "text": pair_groups["text"],
            "connector": self.connector.params(),
            "decoder": self.decoder.params(),
        }

    def params(self):
        out = []
        for group in self.groups().values():
            out += group
        return out

    def set_frozen(self, component: str, frozen: bool) -> None:
        groups = self.groups()
        if component not in groups:
            raise ValueError(f"unknown component {component!r}; have {sorted(groups)}")
        for p in groups[component]:
            p.frozen = bool(frozen)

    def named_params(self) -> dict:
        out = {}
        for p in self.params():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            out[p.name] = p
        return out

    def embed_prompts(self, texts) -> Tensor:
        rows = []
        for text in texts:
            ids = tokenize(text, self.vocab, self.max_len)
            if not ids:
                ids = [1]
            rows.append(ad.reshape(self.pair.text.encode(ids),
                                   (1, self.pair.text.embed_dim)))
        return ad.concat(rows, axis=0)

    def prompt_logits(self, volume, texts, prompt_rows: Tensor | None = None) -> Tensor:
        """(num_prompts, voxels) logits for one volume."""
        if all(p.frozen for p in self.pair.image.params()):
            # frozen encoder contributes constants; keep its ops off the tape
            with ad.no_grad():
                encoding = self.pair.image.encode(volume)
        else:
            encoding = self.pair.image.encode(volume)
        fields = self.decoder(encoding.feature_grid)
        voxels = int(np.prod(fields.shape[1:]))
        flat = ad.reshape(fields, (self.decoder.out_ch, voxels))
        if prompt_rows is None:
            prompt_rows = self.embed_prompts(texts)
        queries = self.connector(prompt_rows, encoding.feature_grid)
        return ad.matmul(queries, flat)

    def segment(self, volume, prompts) -> list:
        if not prompts:
            raise ValueError("prompt list is empty")
        shape = self.pair.image.volume_shape
        with ad.no_grad():
            logits = self.prompt_logits(volume, [p.text for p in prompts])
            probs = ad.sigmoid(logits).data
        out = []
        for i, p in enumerate(prompts):
            grid = probs[i].reshape(shape)
            out.append(PromptedMask(prompt=p, probabilities=grid,
                                    mask=grid >= MASK_THRESHOLD))
        return out


# ---------------------------------------------------------------------------
# Fine-tuning and evaluation
# ---------------------------------------------------------------------------

def _holdout_split(n: int, fraction: float, rng) -> tuple:
    order = list(rng.permutation(n))
    cut = max(1, int(round(n * fraction)))
    return order[cut:], order[:cut]  # train, holdout


def finetune(model: SegModel, samples, prompts, cfg: dict, seed: int,
             log_sink=None) -> tuple:
    """Train connector + decoder with both encoders frozen.

    Training prompts are the resolved table entries with a ground-truth rule;
    absent organs contribute empty targets (the model must learn to emit
    nothing). Returns (model, per-epoch records with held-out macro DSC).
    """
    model.set_frozen("image", True)
    model.set_frozen("text", True)
    train_prompts = [p for p in prompts if parse_gt_rule(p.gt_rule)[0] != "none"]
    if not train_prompts:
        raise ValueError("no trainable prompts (every rule is 'none')")
    rng = rng_for(seed, "finetune")
    train_idx, holdout_idx = _holdout_split(len(samples), cfg["holdout_fraction"], rng)
    train = [samples[i] for i in train_idx]
    holdout = [samples[i] for i in holdout_idx]
    opt = Adam(model.params(), lr=cfg["lr"])
    texts = [p.text for p in train_prompts]
    with ad.no_grad():
        frozen_rows = model.embed_prompts(texts).detach()
    targets = {}  # sample index -> (P, V) float targets
    records = []
    step = 0
    for epoch in range(cfg["epochs"]):
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg["batch_size"]):
            batch = [train[i] for i in order[start:start + cfg["batch_size"]]]
            if not batch:
                continue
            reset_tape()
            opt.zero_grad()
            loss = None
            for sample in batch:
                key = id(sample)
                if key not in targets:
                    targets[key] = np.stack([
                        prompt_target(p, sample.label_map).reshape(-1)
                        for p in train_prompts]).astype(np.float64)
                logits = model.prompt_logits(sample.volume, texts,
                                             prompt_rows=frozen_rows)
                probs = ad.sigmoid(logits)
                per_prompt = dice_loss_per_row(probs, Tensor(targets[key]))
                term = ad.tensor_sum(per_prompt)
                loss = term if loss is None else ad.add(loss, term)
            backward(ad.scale(loss, 1.0 / len(batch)))
            opt.step()
            step += 1
        result = evaluate_seen(model, holdout, train_prompts)
        record = {"epoch": epoch, "step": step, "holdout_macro_dsc": result.macro}
        records.append(record)
        if log_sink is not None:
            log_sink(record)
    reset_tape()
    return model, records


def _category_result(model: SegModel, samples, prompts) -> DiceResult:
    scores = {p.text: [] for p in prompts}
    for sample in samples:
        masks = model.segment(sample.volume, prompts)
        for p, m in zip(prompts, masks):
            target = prompt_target(p, sample.label_map)
            if target is None:
                continue
            scores[p.text].append(dsc(m.mask, target))
    per_prompt = {text: float(np.mean(vals)) for text, vals in scores.items() if vals}
    macro = float(np.mean(list(per_prompt.values()))) if per_prompt else 0.0
    return DiceResult(per_prompt=per_prompt, macro=macro)


def evaluate_seen(model: SegModel, samples, prompts) -> DiceResult:
    return _category_result(model, samples, prompts)


def evaluate_generalization(model: SegModel, samples, registry) -> dict:
    """Macro DSC for the three prompt categories: training-seen canonical
    prompts, merged-pair prompts with union ground truth, and synonym prompts
    (never fine-tuned) scored against the canonical class's ground truth."""
    seen = [Prompt(text=o.name, gt_rule=f"label:{o.label}") for o in registry.organs]
    merged = []
    for group, text in registry.merged_prompts.items():
        ids = [registry.organ_by_name(n).label for n in registry.merge_groups[group]]
        merged.append(Prompt(text=text, gt_rule="union:" + ",".join(map(str, ids))))
    synonyms = [Prompt(text=syn, gt_rule=f"label:{o.label}")
                for o in registry.organs for syn in o.synonyms]
    return {
        "seen": _category_result(model, samples, seen),
        "merged": _category_result(model, samples, merged),
        "synonym": _category_result(model, samples, synonyms),
    }
