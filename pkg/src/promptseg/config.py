"""Run configuration: defaults, validation, and seed derivation.

One global seed fans out to named per-component seeds via a hash, so toggling
one pipeline stage never shifts another stage's random stream. Validation is
strict: unknown or ill-typed keys fail before any work, naming the key.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

__all__ = ["ConfigError", "DEFAULTS", "load_config", "validate_config",
           "config_digest", "derive_seed", "rng_for"]


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "registry_path": None,
    "corpus": {
        "num_samples": 64,
        "synonym_rate": 0.3,
        "vocab_size": 512,
        "max_len": 64,
    },
    "model": {
        "embed_dim": 64,
        "grid_channels": 32,
        "mid_channels": 16,
        "hidden": 64,
        "token_dim": 32,
        "tau_init": 0.07,
    },
    "pretrain": {
        "batch_size": 8,
        "epochs": 25,
        "lr": 0.003,
        "k_captions": 3,
        "loss_weights": [1.0, 1.0],
        "stage0": True,
        "stage0_epochs": 20,
        "stage0_lr": 0.003,
        "stage0_channels": 8,
        "lock_image_encoder": True,
        "mgcl_multi_positive": False,
    },
    "finetune": {
        "batch_size": 6,
        "epochs": 40,
        "lr": 0.005,
        "connector": "mlp",
        "attention_heads": 2,
        "connector_hidden": 64,
        "decoder_channels": 8,
        "holdout_fraction": 0.25,
        "synonym_rate": 0.0,
        "extra_union_prompts": False,
    },
}

_VALIDATORS = {
    "seed": lambda v: isinstance(v, int) and v >= 0,
    "out_dir": lambda v: isinstance(v, str) and bool(v),
    "registry_path": lambda v: v is None or isinstance(v, str),
    "corpus.num_samples": lambda v: isinstance(v, int) and v >= 2,
    "corpus.synonym_rate": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
    "corpus.vocab_size": lambda v: isinstance(v, int) and v >= 8,
    "corpus.max_len": lambda v: isinstance(v, int) and v >= 1,
    "model.embed_dim": lambda v: isinstance(v, int) and v >= 2,
    "model.grid_channels": lambda v: isinstance(v, int) and v >= 1,
    "model.mid_channels": lambda v: isinstance(v, int) and v >= 1,
    "model.hidden": lambda v: isinstance(v, int) and v >= 1,
    "model.token_dim": lambda v: isinstance(v, int) and v >= 1,
    "model.tau_init": lambda v: isinstance(v, (int, float)) and 0.01 <= v <= 100,
    "pretrain.batch_size": lambda v: isinstance(v, int) and v >= 2,
    "pretrain.epochs": lambda v: isinstance(v, int) and v >= 0,
    "pretrain.lr": lambda v: isinstance(v, (int, float)) and v > 0,
    "pretrain.k_captions": lambda v: isinstance(v, int) and v >= 1,
    "pretrain.loss_weights": lambda v: (isinstance(v, list) and len(v) == 2 and
                                        all(isinstance(x, (int, float)) and x >= 0 for x in v)),
    "pretrain.stage0": lambda v: isinstance(v, bool),
    "pretrain.stage0_epochs": lambda v: isinstance(v, int) and v >= 0,
    "pretrain.stage0_lr": lambda v: isinstance(v, (int, float)) and v > 0,
    "pretrain.stage0_channels": lambda v: isinstance(v, int) and v >= 1,
    "pretrain.lock_image_encoder": lambda v: isinstance(v, bool),
    "pretrain.mgcl_multi_positive": lambda v: isinstance(v, bool),
    "finetune.batch_size": lambda v: isinstance(v, int) and v >= 1,
    "finetune.epochs": lambda v: isinstance(v, int) and v >= 0,
    "finetune.lr": lambda v: isinstance(v, (int, float)) and v > 0,
    "finetune.connector": lambda v: v in ("mlp", "cross_attention"),
    "finetune.attention_heads": lambda v: isinstance(v, int) and v >= 1,
    "finetune.connector_hidden": lambda v: isinstance(v, int) and v >= 1,
    "finetune.decoder_channels": lambda v: isinstance(v, int) and v >= 1,
    "finetune.holdout_fraction": lambda v: isinstance(v, (int, float)) and 0 < v < 1,
    "finetune.synonym_rate": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
    "finetune.extra_union_prompts": lambda v: isinstance(v, bool),
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted!r} must be a section object")
            out[key] = _merge(base[key], value, f"{dotted}.")
        else:
            out[key] = value
    return out


def validate_config(cfg: dict) -> dict:
    """Merge over defaults and type-check every leaf; returns the full config."""
    merged = _merge(DEFAULTS, cfg)

    def walk(section, path=""):
        for key, value in section.items():
            dotted = f"{path}{key}"
            if isinstance(value, dict):
                walk(value, f"{dotted}.")
                continue
            check = _VALIDATORS.get(dotted)
            if check is None:
                raise ConfigError(f"unknown config key: {dotted!r}")
            if not check(value):
                raise ConfigError(f"invalid value for config key {dotted!r}: {value!r}")

    walk(merged)
    return merged


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    return validate_config(raw)


def config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, name))
