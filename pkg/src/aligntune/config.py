"""Run configuration: JSON files, dotted-path overrides and ablation presets."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

DEFAULTS: dict[str, dict[str, Any]] = {
    "corpus": {
        "num_train": 200,
        "num_dev": 50,
        "vocab_size": 50,
        "num_labels": 4,
        "image_size": 64,
        "max_tokens": 16,
        "min_tokens": None,
        "slot_width": 16,
        "slot_height": 8,
        "text_ambiguous": False,
        "quadrant_shift": True,
        "ink_noise": 0.02,
        "seed": 0,
    },
    "model": {
        "hidden_size": 64,
        "num_layers_img": 2,
        "num_layers_txt": 2,
        "num_layers_fusion": 2,
        "num_heads": 4,
        "proj_dim": 32,
        "patch_size": 16,
        "fusion_embed_norm": True,
    },
    "train": {
        "epochs": 20,
        "batch_size": 4,
        "lr": 1e-3,
        "min_lr": 1e-5,
        "warmup_frac": 0.05,
        "weight_decay": 0.02,
        "grad_clip": 1.0,
        "seed": 0,
        "momentum": 0.995,
        "queue_size": 256,
        "alpha": 0.4,
        "tau_init": 0.07,
        "positive_in_denominator": True,
        "pool_kernel": 1,
        "pool_stride": 1,
        "eval_every": 0,
        "checkpoint_every": 0,
        "stop_after": None,
        "max_params": 50_000_000,
        "lr_image": None,
        "lr_text": None,
        "lr_fusion": None,
        "lr_temperature": None,
    },
    "losses": {"so": 1.0, "ditc": 1.0, "imc": 1.0, "glitc": 1.0, "pita": 1.0},
}

PRESETS: dict[str, dict[str, float]] = {
    "so_only": {"so": 1.0, "ditc": 0.0, "imc": 0.0, "glitc": 0.0, "pita": 0.0},
    "+ditc": {"so": 1.0, "ditc": 1.0, "imc": 0.0, "glitc": 0.0, "pita": 0.0},
    "+imc": {"so": 1.0, "ditc": 0.0, "imc": 1.0, "glitc": 0.0, "pita": 0.0},
    "+glitc": {"so": 1.0, "ditc": 0.0, "imc": 0.0, "glitc": 1.0, "pita": 0.0},
    "+pita": {"so": 1.0, "ditc": 0.0, "imc": 0.0, "glitc": 0.0, "pita": 1.0},
    "full": {"so": 1.0, "ditc": 1.0, "imc": 1.0, "glitc": 1.0, "pita": 1.0},
}


class ConfigError(ValueError):
    """Unknown key or unparsable value in a config file or override."""


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: Mapping, prefix: str = "") -> None:
    for key, val in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(val, Mapping):
                raise ConfigError(f"config key {path} must be an object")
            _merge(base[key], val, path + ".")
        else:
            base[key] = val


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the JSON file, then the preset's loss weights, then ``key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        preset = data.pop("preset", None) if preset is None else preset
        data.pop("preset", None)
        _merge(cfg, data)
    if preset is not None:
        apply_preset(cfg, preset)
    for item in overrides:
        set_path(cfg, item)
    return cfg


def apply_preset(cfg: dict, preset: str) -> None:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg["losses"].update(PRESETS[preset])


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, item: str) -> None:
    """Apply one ``dotted.key=value`` override; the key must already exist."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {key}")
        if i < len(parts) - 1:
            node = node[part]
    if isinstance(node[parts[-1]], dict):
        raise ConfigError(f"config key {key} names a section, not a value")
    node[parts[-1]] = parse_value(raw)
