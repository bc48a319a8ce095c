"""Experiment configuration: schema validation, overrides, seed derivation.

One JSON file describes an experiment: the dataset manifest plus model /
diffusion / train / eval sections and per-command blocks. Every run validates
the file against EXPERIMENT_SCHEMA before any work starts, and all component
seeds are derived from one root seed via a stable hash.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import jsonschema

from .data import SubsetSpec
from .denoiser import ModelConfig
from .diffusion import DiffusionConfig
from .errors import ConfigError, ParseError
from .metrics import EvalProtocol
from .trainer import TrainConfig
from .ts2img import EmbedConfig

_SUBSET_SCHEMA = {
    "type": "object",
    "properties": {
        "mode": {"enum": ["percentage", "fixed_count", "full"]},
        "value": {"type": "number"},
        "seed": {"type": "integer"},
    },
    "required": ["mode"],
    "additionalProperties": False,
}

EXPERIMENT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "$defs": {
        "train": {
            "type": "object",
            "properties": {
                "learning_rate": {"type": "number"},
                "weight_decay": {"type": "number"},
                "ema_decay": {"type": "number"},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "mixing": {"enum": ["proportional", "uniform"]},
                "grad_clip": {"type": "number"},
            },
            "additionalProperties": False,
        },
    },
    "properties": {
        "datasets": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "channels": {"type": "integer", "minimum": 1},
                    "window_length": {"type": "integer", "minimum": 2},
                    "csv_path": {"type": "string"},
                    "generator": {"enum": ["sine", "ar1"]},
                    "generator_params": {"type": "object"},
                    "normalization": {"enum": ["minmax", "zscore"]},
                    "split_fractions": {
                        "type": "array", "items": {"type": "number"},
                        "minItems": 2, "maxItems": 2,
                    },
                    "windowing": {"enum": ["sliding", "per_instance"]},
                },
                "required": ["name", "channels"],
                "additionalProperties": False,
            },
        },
        "model": {
            "type": "object",
            "properties": {
                "size_variant": {"enum": ["base", "medium", "large", "xl"]},
                "base_channels": {"type": "integer", "minimum": 1},
                "channel_multipliers": {"type": "array",
                                        "items": {"type": "integer"}},
                "attention_resolutions": {"type": "array",
                                          "items": {"type": "integer"}},
                "image_side": {"type": "integer", "minimum": 1},
                "num_res_blocks": {"type": "integer", "minimum": 0},
                "num_middle_blocks": {"type": "integer", "minimum": 0},
                "kernel_size": {"type": "integer", "minimum": 1},
                "canonical_channels": {"type": "integer", "minimum": 1},
                "emb_channels": {"type": "integer", "minimum": 1},
                "token_channels": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "diffusion": {
            "type": "object",
            "properties": {k: {"type": "number"} for k in
                           ("sigma_data", "sigma_min", "sigma_max",
                            "p_mean", "p_std", "rho")} |
                          {"num_steps": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "train": {"$ref": "#/$defs/train"},
        "embed": {
            "type": "object",
            "properties": {"skip": {"type": "integer", "minimum": 1},
                           "window": {"type": "integer", "minimum": 1}},
            "additionalProperties": False,
        },
        "eval": {
            "type": "object",
            "properties": {
                "num_generated": {"type": ["integer", "null"]},
                "classifier_hidden": {"type": ["integer", "null"]},
                "classifier_epochs": {"type": "integer"},
                "predictor_hidden": {"type": ["integer", "null"]},
                "predictor_epochs": {"type": "integer"},
                "encoder_dim": {"type": "integer"},
                "encoder_hidden": {"type": "integer"},
                "encoder_epochs": {"type": "integer"},
                "batch_size": {"type": "integer"},
                "seeds": {"type": "array", "items": {"type": "integer"}},
            },
            "additionalProperties": False,
        },
        "pretrain": {
            "type": "object",
            "properties": {
                "corpus": {"type": "array", "items": {"type": "string"}},
                # stage-specific settings layered over the top-level train section
                "train": {"$ref": "#/$defs/train"},
            },
            "additionalProperties": False,
        },
        "finetune": {
            "type": "object",
            "properties": {
                "checkpoint": {"type": "string"},
                "dataset": {"type": "string"},
                "token_name": {"type": "string"},
                "subset": _SUBSET_SCHEMA,
            },
            "required": ["checkpoint", "dataset"],
            "additionalProperties": False,
        },
        "sample": {
            "type": "object",
            "properties": {
                "checkpoint": {"type": "string"},
                "dataset": {"type": "string"},
                "conditional": {"type": "boolean"},
                "num_samples": {"type": "integer", "minimum": 1},
                "length": {"type": "integer", "minimum": 1},
                "channels": {"type": "integer", "minimum": 1},
            },
            "required": ["checkpoint"],
            "additionalProperties": False,
        },
        "evaluate": {
            "type": "object",
            "properties": {
                "checkpoint": {"type": "string"},
                "dataset": {"type": "string"},
                "conditional": {"type": "boolean"},
                "token_name": {"type": "string"},
            },
            "required": ["checkpoint", "dataset"],
            "additionalProperties": False,
        },
        "benchmark": {
            "type": "object",
            "properties": {
                "models": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {
                            "name": {"type": "string"},
                            "checkpoint": {"type": ["string", "null"]},
                        },
                        "required": ["name"],
                        "additionalProperties": False,
                    },
                },
                "datasets": {"type": "array", "items": {"type": "string"}},
                "subsets": {"type": "array", "items": {"type": "string"}},
            },
            "required": ["models", "datasets", "subsets"],
            "additionalProperties": False,
        },
        "profile": {
            "type": "object",
            "properties": {
                "c_in": {"type": "integer", "minimum": 1},
                "c_out": {"type": "integer", "minimum": 1},
                "height": {"type": "integer", "minimum": 1},
                "width": {"type": "integer", "minimum": 1},
                "kernel_size": {"type": "integer", "minimum": 1},
                "channels": {"type": "array", "items": {"type": "integer"}},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


def derive_seed(root, *labels) -> int:
    """Stable 32-bit seed for a named component, derived from the root seed."""
    text = "|".join([str(root), *map(str, labels)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def apply_overrides(config: dict, overrides) -> dict:
    """Apply repeatable `--override dotted.path=value` pairs (values are JSON)."""
    for item in overrides or ():
        path, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} crosses a non-object")
        node[keys[-1]] = value
    return config


def validate_experiment(config: dict) -> dict:
    try:
        jsonschema.validate(config, EXPERIMENT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"experiment config invalid: {exc.message}") from exc
    return config


def load_experiment(path, overrides=()) -> dict:
    try:
        config = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc}") from exc
    apply_overrides(config, overrides)
    return validate_experiment(config)


def model_config_from(section: dict) -> ModelConfig:
    section = dict(section or {})
    for key in ("channel_multipliers", "attention_resolutions"):
        if key in section:
            section[key] = tuple(section[key])
    variant = section.pop("size_variant", None)
    if variant is not None and "base_channels" not in section:
        return ModelConfig.for_variant(variant, **section)
    return ModelConfig(size_variant=variant, **section)


def train_config_from(section: dict, seed: int = 0) -> TrainConfig:
    return TrainConfig(seed=seed, **(section or {}))


def diffusion_config_from(section: dict) -> DiffusionConfig:
    return DiffusionConfig(**(section or {}))


def embed_config_from(section: dict) -> EmbedConfig:
    return EmbedConfig(**(section or {}))


def eval_protocol_from(section: dict) -> EvalProtocol:
    section = dict(section or {})
    if "seeds" in section:
        section["seeds"] = tuple(section["seeds"])
    return EvalProtocol(**section)


def subset_from(section, seed: int = 0) -> SubsetSpec:
    if section is None:
        return SubsetSpec("full", seed=seed)
    if isinstance(section, str):
        return SubsetSpec.parse(section, seed=seed)
    section = dict(section)
    section.setdefault("seed", seed)
    return SubsetSpec(**section)
