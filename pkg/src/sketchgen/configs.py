"""Run configuration: JSON file, environment, and flag overrides, in that precedence."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from pathlib import Path

logger = logging.getLogger("sketchgen")

__all__ = ["default_config", "resolve_config", "config_hash", "ENV_PREFIX"]

ENV_PREFIX = "SKETCHGEN_"


def default_config() -> dict:
    return {
        "workdir": "artifacts/run",
        "dataset": {
            "resolution": 64,
            "train_count": 400,
            "test_count": 100,
            "seed": 0,
            "deformation": 0.02,
        },
        "generator": {
            "resolution": 64,
            "latent_dim": 64,
            "mapping_depth": 4,
            "base_channels": 16,
            "max_channels": 128,
        },
        "gan": {
            "steps": 3000,
            "batch_size": 8,
            "lr": 1e-3,
            "betas": [0.0, 0.99],
            "r1_gamma": 2.0,
            "seed": 0,
        },
        "embedder": {
            "embed_dim": 64,
            "channels": 32,
            "share_branches": False,
            "margin": 0.2,
            "epochs": 20,
            "batch_size": 16,
            "lr": 1e-3,
            "seed": 0,
        },
        "teacher": {
            "backbone_depth": 4,
            "epochs": 12,
            "batch_size": 8,
            "lr": 1e-3,
            "seed": 0,
        },
        "mapper": {
            "backbone_depth": 4,
            "raw_gaussian_rows": False,
            "steps": 1500,
            "batch_size": 4,
            "lr": 1e-3,
            "lookahead_k": 5,
            "lookahead_alpha": 0.5,
            "seed": 0,
            "frozen_check_every": 25,
            "weights": {"rec": 1.0, "lpips": 0.8, "disc": 0.5, "kd": 0.6},
        },
        "eval": {
            "seed": 0,
            "gallery_size": 100,
            "noise_fractions": [0.0, 0.4, 0.8],
            "completions": [0.25, 0.5, 0.75, 1.0],
        },
        "service": {"port": 8008},
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _set_dotted(config: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _env_overrides(environ: dict) -> list[tuple[str, object]]:
    out = []
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        dotted = key[len(ENV_PREFIX) :].lower().replace("__", ".")
        out.append((dotted, _parse_value(raw)))
    return sorted(out)


def resolve_config(config_path: str | Path | None = None,
                   overrides: list[str] | None = None,
                   environ: dict | None = None) -> dict:
    """flags > environment (SKETCHGEN_SECTION__FIELD) > config file > defaults."""
    config = default_config()
    if config_path:
        file_cfg = json.loads(Path(config_path).read_text())
        config = _deep_merge(config, file_cfg)
    for dotted, value in _env_overrides(environ if environ is not None else dict(os.environ)):
        _set_dotted(config, dotted, value)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override must look like section.field=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        _set_dotted(config, dotted.strip(), _parse_value(raw.strip()))
    config["config_hash"] = config_hash(config)
    logger.info("resolved config hash %s", config["config_hash"])
    return config


def config_hash(config: dict) -> str:
    scrubbed = {k: v for k, v in config.items() if k != "config_hash"}
    canon = json.dumps(scrubbed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
