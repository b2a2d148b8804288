"""Toy image/text encoders sharing a projected embedding space.

The image branch is two strided 3-D convolutions (kernel = stride = 2, so the
spatial extent shrinks by 4 overall) followed by mean pooling and a small MLP
projection. The text branch is an embedding table, mean over positions, and
the same MLP shape. Both branches emit L2-normalized vectors in a shared
d-dimensional space; a learnable log-temperature scales their similarities.

Convolutions with kernel == stride have no overlap, so they reduce exactly to
a reshape/permute/matmul composite; every op stays on the autodiff tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, parameter, uniform_init
from .corpus import normalize_text

__all__ = [
    "PAD_TOKEN",
    "UNK_TOKEN",
    "Vocab",
    "tokenize",
    "Linear",
    "PatchConv3d",
    "PatchDeconv3d",
    "ImageEncoding",
    "ImageEncoder",
    "TextEncoder",
    "EncoderPair",
    "TAU_MIN",
    "TAU_MAX",
]

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

TAU_MIN = 0.01
TAU_MAX = 100.0


class Vocab:
    """Word-level vocabulary: line index = id, first two rows PAD and UNK."""

    def __init__(self, words):
        if list(words[:2]) != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must reserve ids 0/1 for PAD/UNK")
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")

    def __len__(self):
        return len(self.words)

    @classmethod
    def build(cls, texts, size: int = 512) -> "Vocab":
        """Whitespace-split lowercase words, most frequent first.

        Count ties break lexicographically so the id assignment is a pure
        function of the corpus.
        """
        from collections import Counter

        counts = Counter(w for t in texts for w in normalize_text(t).split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = [w for w, _ in ranked[: max(size - 2, 0)]]
        return cls([PAD_TOKEN, UNK_TOKEN] + keep)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def tokenize(text: str, vocab: Vocab, max_len: int = 64) -> list[int]:
    """Map a string to word ids; unknown words become UNK; truncate to max_len."""
    words = normalize_text(text).split()
    return [vocab.index.get(w, UNK_ID) for w in words[:max_len]]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Linear:
    def __init__(self, rng, in_dim: int, out_dim: int, name: str):
        self.w = parameter(uniform_init(rng, (in_dim, out_dim), in_dim), f"{name}.w")
        self.b = parameter(uniform_init(rng, (out_dim,), in_dim), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class PatchConv3d:
    """3-D convolution with kernel 2, stride 2: one matmul over 2x2x2 patches."""

    def __init__(self, rng, in_ch: int, out_ch: int, name: str):
        fan_in = in_ch * 8
        self.w = parameter(uniform_init(rng, (fan_in, out_ch), fan_in), f"{name}.w")
        self.b = parameter(uniform_init(rng, (out_ch,), fan_in), f"{name}.b")
        self.in_ch = in_ch
        self.out_ch = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        cin, d, h, w = x.shape
        if cin != self.in_ch or d % 2 or h % 2 or w % 2:
            raise ad.ShapeError(
                f"patch conv expects ({self.in_ch}, even, even, even), got {x.shape}")
        x = ad.reshape(x, (cin, d // 2, 2, h // 2, 2, w // 2, 2))
        x = ad.permute(x, (1, 3, 5, 0, 2, 4, 6))
        x = ad.reshape(x, (d // 2 * h // 2 * w // 2, cin * 8))
        y = ad.add(ad.matmul(x, self.w), self.b)
        y = ad.reshape(y, (d // 2, h // 2, w // 2, self.out_ch))
        return ad.permute(y, (3, 0, 1, 2))

    def params(self):
        return [self.w, self.b]


class PatchDeconv3d:
    """Transposed counterpart of PatchConv3d: doubles each spatial extent."""

    def __init__(self, rng, in_ch: int, out_ch: int, name: str):
        self.w = parameter(uniform_init(rng, (in_ch, out_ch * 8), in_ch), f"{name}.w")
        self.b = parameter(uniform_init(rng, (out_ch * 8,), in_ch), f"{name}.b")
        self.in_ch = in_ch
        self.out_ch = out_ch

    def __call__(self, x: Tensor) -> Tensor:
        cin, d, h, w = x.shape
        if cin != self.in_ch:
            raise ad.ShapeError(f"deconv expects {self.in_ch} channels, got {x.shape}")
        x = ad.permute(x, (1, 2, 3, 0))
        x = ad.reshape(x, (d * h * w, cin))
        y = ad.add(ad.matmul(x, self.w), self.b)
        y = ad.reshape(y, (d, h, w, self.out_ch, 2, 2, 2))
        y = ad.permute(y, (3, 0, 4, 1, 5, 2, 6))
        return ad.reshape(y, (self.out_ch, d * 2, h * 2, w * 2))

    def params(self):
        return [self.w, self.b]


def mlp_head(rng, in_dim: int, hidden: int, out_dim: int, name: str):
    """One-hidden-layer ReLU MLP used as projection on both branches."""
    return Linear(rng, in_dim, hidden, f"{name}.hidden"), Linear(rng, hidden, out_dim, f"{name}.out")


def _apply_head(head, x: Tensor) -> Tensor:
    hidden_layer, out_layer = head
    return out_layer(ad.relu(hidden_layer(x)))


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

@dataclass
class ImageEncoding:
    feature_grid: Tensor      # (C, D', H', W'), stride 4 from the input
    global_embedding: Tensor  # (d,), unit norm


class ImageEncoder:
    def __init__(self, rng, volume_shape=(32, 32, 32), mid_channels: int = 16,
                 grid_channels: int = 32, hidden: int = 64, embed_dim: int = 64):
        self.volume_shape = tuple(volume_shape)
        self.grid_channels = grid_channels
        self.embed_dim = embed_dim
        self.conv1 = PatchConv3d(rng, 1, mid_channels, "image.conv1")
        self.conv2 = PatchConv3d(rng, mid_channels, grid_channels, "image.conv2")
        self.head = mlp_head(rng, grid_channels, hidden, embed_dim, "image.proj")

    def params(self):
        out = self.conv1.params() + self.conv2.params()
        for layer in self.head:
            out += layer.params()
        return out

    def encode(self, volume) -> ImageEncoding:
        vol = volume.data if isinstance(volume, Tensor) else np.asarray(volume, dtype=np.float64)
        if vol.shape != self.volume_shape:
            raise ad.ShapeError(
                f"volume shape {vol.shape} does not match configured {self.volume_shape}")
        x = volume if isinstance(volume, Tensor) else Tensor(vol)
        x = ad.reshape(x, (1,) + self.volume_shape)
        grid = ad.relu(self.conv2(ad.relu(self.conv1(x))))
        pooled = ad.reshape(ad.mean_pool(grid, (1, 2, 3)), (1, self.grid_channels))
        projected = _apply_head(self.head, pooled)
        global_embedding = ad.reshape(ad.l2_normalize(projected), (self.embed_dim,))
        return ImageEncoding(feature_grid=grid, global_embedding=global_embedding)


class TextEncoder:
    def __init__(self, rng, vocab_size: int, token_dim: int = 32, hidden: int = 64,
                 embed_dim: int = 64):
        self.vocab_size = vocab_size
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        self.table = parameter(uniform_init(rng, (vocab_size, token_dim), token_dim),
                               "text.table")
        self.head = mlp_head(rng, token_dim, hidden, embed_dim, "text.proj")

    def params(self):
        out = [self.table]
        for layer in self.head:
            out += layer.params()
        return out

    def encode(self, token_ids) -> Tensor:
        ids = list(token_ids)
        if not ids:
            raise ad.AutodiffError("cannot encode an empty token sequence")
        rows = ad.gather_rows(self.table, ids)
        pooled = ad.reshape(rows.mean(axis=0), (1, self.token_dim))
        projected = _apply_head(self.head, pooled)
        return ad.reshape(ad.l2_normalize(projected), (self.embed_dim,))


class EncoderPair:
    """Both encoders plus the learnable temperature, with per-group freezing.

    The temperature lives in the text group: it trains exactly when the text
    branch does (contrastive alignment) and freezes with it during mask
    fine-tuning.
    """

    def __init__(self, vocab_size: int, seed_rngs, volume_shape=(32, 32, 32),
                 mid_channels: int = 16, grid_channels: int = 32, hidden: int = 64,
                 embed_dim: int = 64, token_dim: int = 32, tau_init: float = 0.07):
        rng_image, rng_text = seed_rngs
        self.image = ImageEncoder(rng_image, volume_shape, mid_channels,
                                  grid_channels, hidden, embed_dim)
        self.text = TextEncoder(rng_text, vocab_size, token_dim, hidden, embed_dim)
        self.log_tau = parameter(math.log(tau_init), "log_tau")

    def tau(self) -> Tensor:
        return ad.exp(ad.clamp(self.log_tau, math.log(TAU_MIN), math.log(TAU_MAX)))

    def groups(self) -> dict:
        return {
            "image": self.image.params(),
            "text": self.text.params() + [self.log_tau],
        }

    def params(self):
        return self.image.params() + self.text.params() + [self.log_tau]

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
