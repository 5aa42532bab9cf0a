"""Run configuration: JSON document with keyed defaults, strict validation.

A config has five sections (data, model, optimizer, schedule, task); unknown
keys anywhere are rejected.  Command-line ``--set section.key=value``
overrides win over the file.  Artifacts land in a per-run directory named
by config hash + timestamp under $DIT_DESK_DIR (default ./runs).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time
from pathlib import Path

ENV_RUN_ROOT = "DIT_DESK_DIR"


class ConfigError(ValueError):
    """Invalid configuration: bad file, unknown key, or bad value."""


class MissingCheckpointError(FileNotFoundError):
    """A required checkpoint file does not exist."""


DEFAULTS: dict = {
    "data": {
        "dir": "data",
        "n": 64,
        "seed": 0,
        "page": 448,
        "mix_weights": None,  # list of 16 weights, or None for uniform
        "image_size": 224,
    },
    "model": {
        "preset": "dit-tiny",  # dit-b | dit-l | dit-tiny
        "drop_path": None,  # None = preset value
        "num_classes": 16,
        "fpn_channels": 256,
        "dvae": {
            "codebook_size": 8192,
            "code_dim": 128,
            "hidden": 64,
            "perplexity_weight": 0.1,
            "temperature_floor": 1e-10,
        },
    },
    "optimizer": {
        "lr": 1e-3,
        "weight_decay": 0.05,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "schedule": {
        "warmup_steps": 10_000,
        "total_steps": 500_000,
    },
    "task": {
        "seed": 0,
        "steps": 200,
        "batch": 8,
        "mask_ratio": 0.4,
        "min_block": 16,
        "augment": True,
        "checkpoint_every": 0,
        "dvae_epochs": 3,
        "dvae_batch": 8,
        "dvae_lr": 5e-4,
        "dvae_image_size": 112,
        "classify_epochs": 90,
        "classify_batch": 128,
        "classify_lr": 1e-3,
        "detect_epochs": 40,
        "detect_batch": 2,
        "detect_lr": 1e-3,
        "anchors": "layout",  # layout | text
        "binarize": False,
        "binarize_window": 31,
        "binarize_offset": 10,
        "score_thr": 0.05,
        "nms_iou": 0.5,
        "eval_iou": 0.5,
        "workers": 1,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a section, got {type(value).__name__}")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    """Load and validate a config file, then apply ``section.key=value`` overrides."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
    cfg = _merge(DEFAULTS, doc)
    for item in overrides or []:
        cfg = _apply_override(cfg, item)
    return cfg


def _apply_override(cfg: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override must look like section.key=value, got {item!r}")
    dotted, raw = item.split("=", 1)
    keys = dotted.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    leaf = node
    for k in keys[:-1]:
        leaf[k] = {}
        leaf = leaf[k]
    leaf[keys[-1]] = value
    return _merge(cfg, node)


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:8]


def make_run_dir(cfg: dict, root: str | Path | None = None) -> Path:
    base = Path(root or os.environ.get(ENV_RUN_ROOT, "runs"))
    name = f"{config_hash(cfg)}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir = base / name
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg, indent=1))
    return run_dir


def require_checkpoint(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingCheckpointError(f"required checkpoint missing: {p}")
    return p
