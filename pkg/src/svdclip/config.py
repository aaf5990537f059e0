"""Run configuration: YAML/JSON document, defaults, and schema validation.

Every key is optional; missing keys take the values in :data:`DEFAULTS`.
The resolved document is embedded in every results file.
"""

from __future__ import annotations

import copy
import os

import jsonschema
import yaml

from .adapt import AdaptHyper
from .clip_core import ModelConfig
from .encoder import EncoderConfig
from .errors import ConfigError, MissingFileError
from .svd_param import RankMaskSpec
from .synth_data import SyntheticCorpusConfig

_ENCODER = {"embed_dim": 32, "num_heads": 4, "mlp_dim": 64, "num_layers": 2, "activation": "relu"}

DEFAULTS = {
    "seed": 0,
    "model": {
        "vision": dict(_ENCODER),
        "text": dict(_ENCODER),
        "embed_dim": 32,
        "patch_dim": 8,
        "num_patches": 4,
        "vocab_size": 64,
        "max_text_len": 8,
        "qkv_granularity": "head",
        "init_std": 0.02,
        "tau_init": 0.07,
    },
    "pretrain": {
        "corpus": {"num_classes": 32, "samples_per_class": 32, "seed": 1000, "noise": 0.1},
        "epochs": 20,
        "lr": 1e-3,
        "batch_size": 32,
        "weight_decay": 0.01,
    },
    "task": {
        "corpus": {"num_classes": 8, "samples_per_class": 48, "seed": 7, "noise": 0.1},
        "base_fraction": 0.5,
        "train_fraction": 0.5,
        "split_seed": 0,
        "classes": "all",
        "shots": 16,
    },
    "adapt": {
        "lr": 1e-2,
        "iterations": None,
        "iteration_scale": 0.1,
        "batch_size": 32,
        "weight_decay": 0.01,
        "mask": {"mode": "all", "k": None, "ratio": None},
    },
    "ablation": {
        "modes": ["top_k", "bottom_k"],
        "ratios": [0.125, 0.25, 0.5, 0.75, 1.0],
        "seeds": [0],
        "shots": 4,
    },
    "interpret": {"layers": None, "m": 3},
}

_count = {"type": "integer", "minimum": 1}
_encoder_schema = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "embed_dim": _count,
        "num_heads": _count,
        "mlp_dim": _count,
        "num_layers": {"type": "integer", "minimum": 0},
        "activation": {"enum": ["relu", "gelu"]},
    },
}
_corpus_schema = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "num_classes": _count,
        "num_patches": _count,
        "patch_dim": _count,
        "text_len": _count,
        "vocab_size": _count,
        "samples_per_class": _count,
        "noise": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "latent_dim": _count,
        "render_seed": {"type": "integer"},
        "jitter": {"type": "integer", "minimum": 0},
    },
}
_mask_schema = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["all", "top_k", "bottom_k"]},
        "k": {"type": ["integer", "null"], "minimum": 1},
        "ratio": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "vision": _encoder_schema,
                "text": _encoder_schema,
                "embed_dim": _count,
                "patch_dim": _count,
                "num_patches": _count,
                "vocab_size": _count,
                "max_text_len": _count,
                "qkv_granularity": {"enum": ["head", "full"]},
                "init_std": {"type": "number", "exclusiveMinimum": 0},
                "tau_init": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "pretrain": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "corpus": _corpus_schema,
                "epochs": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "minimum": 0},
                "batch_size": _count,
                "weight_decay": {"type": "number", "minimum": 0},
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "corpus": _corpus_schema,
                "base_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "split_seed": {"type": "integer"},
                "classes": {"enum": ["all", "base", "novel"]},
                "shots": _count,
            },
        },
        "adapt": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr": {"type": "number", "minimum": 0},
                "iterations": {"type": ["integer", "null"], "minimum": 1},
                "iteration_scale": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": _count,
                "weight_decay": {"type": "number", "minimum": 0},
                "mask": _mask_schema,
            },
        },
        "ablation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "modes": {"type": "array", "items": {"enum": ["all", "top_k", "bottom_k"]}, "minItems": 1},
                "ratios": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "minItems": 1,
                },
                "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                "shots": _count,
            },
        },
        "interpret": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
                "m": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def validate(doc: dict) -> dict:
    """Check ``doc`` against :data:`SCHEMA` and return it merged over the defaults."""
    if doc is None:
        doc = {}
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from exc
    resolved = _merge(DEFAULTS, doc)
    # building the typed objects catches cross-field errors (e.g. heads vs width)
    RunConfig(resolved).model_config()
    return resolved


def load_config(path=None, seed=None) -> "RunConfig":
    doc = {}
    if path is not None:
        if not os.path.exists(path):
            raise MissingFileError(f"no such file: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                doc = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    if seed is not None:
        doc = dict(doc, seed=seed)
    return RunConfig(validate(doc))


class RunConfig:
    """Typed accessors over a resolved configuration document."""

    def __init__(self, doc: dict):
        self.doc = doc

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    def model_config(self) -> ModelConfig:
        m = dict(self.doc["model"])
        m["vision"] = EncoderConfig(**m["vision"])
        m["text"] = EncoderConfig(**m["text"])
        return ModelConfig(**m)

    def corpus_config(self, section: str) -> SyntheticCorpusConfig:
        model = self.doc["model"]
        base = {
            "num_patches": model["num_patches"],
            "patch_dim": model["patch_dim"],
            "vocab_size": model["vocab_size"],
            "text_len": min(4, model["max_text_len"]),
        }
        base.update(self.doc[section]["corpus"])
        return SyntheticCorpusConfig(**base)

    def adapt_hyper(self, seed=None, mask=None) -> AdaptHyper:
        a = self.doc["adapt"]
        return AdaptHyper(
            lr=a["lr"],
            iterations=a["iterations"],
            iteration_scale=a["iteration_scale"],
            batch_size=a["batch_size"],
            weight_decay=a["weight_decay"],
            mask=mask or RankMaskSpec.from_dict(a["mask"]),
            seed=self.seed if seed is None else seed,
        )
