"""Configuration and utilities for mtlab."""

import difflib
import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv
from jsonschema import Draft7Validator

from .errors import ConfigValidationError
from .models import Architecture, DirectionConfig, ExperimentConfig, Mixing, ModelConfig, Regime, TrainConfig
from .presets import CELL_FILTERS, REDUCED_CELLS
from .metrics import SMOOTHING_METHODS


def setup_logging(level: str = "INFO") -> None:
    """Set up logging configuration."""
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


def load_env_config() -> dict:
    """Load configuration from environment variables (and a .env file if present)."""
    load_dotenv()
    jobs = os.getenv('MTLAB_JOBS')
    return {
        'log_level': os.getenv('MTLAB_LOG_LEVEL', 'INFO'),
        'output_dir': os.getenv('MTLAB_OUTPUT_DIR'),
        'jobs': int(jobs) if jobs else None,
    }


class MTLabConfig:
    """Configuration manager for mtlab."""

    def __init__(self):
        self.config = load_env_config()

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value."""
        return self.config.get(key, default)


# ---------------------------------------------------------------------------
# Experiment config schema
# ---------------------------------------------------------------------------

_LANG = {"type": "string", "pattern": "^[A-Za-z]{2,3}([-_][A-Za-z0-9]+)?$"}
_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "d_model": _POS_INT,
        "n_heads": _POS_INT,
        "n_layers": _NONNEG_INT,
        "n_enc_layers": _NONNEG_INT,
        "n_dec_layers": _NONNEG_INT,
        "d_ff": _POS_INT,
        "max_seq_len": {"type": "integer", "minimum": 2},
        "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "tie_embeddings": {"type": "boolean"},
        "position_embeddings": {"type": "boolean"},
        "layer_norm_eps": {"type": "number", "exclusiveMinimum": 0},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "adam_beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "adam_eps": {"type": "number", "exclusiveMinimum": 0},
        "grad_clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "batch_size": _POS_INT,
        "max_steps": _POS_INT,
        "warmup_steps": _NONNEG_INT,
        "checkpoint_every": _NONNEG_INT,
        "log_every": _POS_INT,
        "record_wall_clock": {"type": "boolean"},
    },
}

EXPERIMENT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "corpora", "regimes"],
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9._-]+$"},
        "seed": _NONNEG_INT,
        "output_dir": {"type": "string", "minLength": 1},
        "jobs": _POS_INT,
        "corpora": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["path", "src_lang", "tgt_lang"],
                "properties": {
                    "path": {"type": "string", "minLength": 1},
                    "src_lang": _LANG,
                    "tgt_lang": _LANG,
                    "bidirectional": {"type": "boolean"},
                },
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "min_chars": _NONNEG_INT,
                "max_chars": _NONNEG_INT,
                "valid_size": {"type": "number", "minimum": 0},
                "test_size": {"type": "number", "minimum": 0},
                "skip_bad": {"type": "boolean"},
                "eval_on_train": {"type": "boolean"},
            },
        },
        "tokenizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "vocab_size": {"type": "integer", "minimum": 6},
                "extra_specials": {"type": "array", "items": {"type": "string", "minLength": 1}},
            },
        },
        "architectures": {
            "type": "array",
            "minItems": 1,
            "uniqueItems": True,
            "items": {"enum": [a.value for a in Architecture]},
        },
        "regimes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["regime", "source_langs", "target_langs"],
                "properties": {
                    "regime": {"enum": [r.value for r in Regime]},
                    "source_langs": {"type": "array", "minItems": 1, "items": _LANG},
                    "target_langs": {"type": "array", "minItems": 1, "items": _LANG},
                    "mixing": {"enum": [m.value for m in Mixing]},
                },
            },
        },
        "cells": {"enum": list(CELL_FILTERS)},
        "model": MODEL_SCHEMA,
        "model_overrides": {
            "type": "object",
            "additionalProperties": False,
            "properties": {a.value: MODEL_SCHEMA for a in Architecture},
        },
        "train": TRAIN_SCHEMA,
        "generation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_new_tokens": _POS_INT,
                "beam_width": _POS_INT,
                "length_penalty": {"type": "number", "minimum": 0},
            },
        },
        "metrics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bucket_edges": {"type": "array", "items": _POS_INT},
                "bleu_smoothing": {"enum": list(SMOOTHING_METHODS)},
            },
        },
    },
}


def _location(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def _schema_errors(data: Any) -> List[str]:
    validator = Draft7Validator(EXPERIMENT_SCHEMA)
    messages = []
    for error in sorted(validator.iter_errors(data), key=lambda e: (list(map(str, e.absolute_path)), e.message)):
        where = _location(error.absolute_path)
        if error.validator == "additionalProperties" and isinstance(error.instance, dict):
            allowed = list(error.schema.get("properties", {}))
            for key in sorted(set(error.instance) - set(allowed)):
                match = difflib.get_close_matches(key, allowed, n=1)
                hint = f" (did you mean '{match[0]}'?)" if match else ""
                messages.append(f"{where}: unknown key '{key}'{hint}")
        else:
            messages.append(f"{where}: {error.message}")
    return messages


def _file_errors(data: Dict[str, Any], base_dir: Path) -> List[str]:
    errors = []
    corpora = data.get("corpora")
    if not isinstance(corpora, list):
        return errors
    for index, entry in enumerate(corpora):
        if isinstance(entry, dict) and isinstance(entry.get("path"), str):
            path = resolve_path(entry["path"], base_dir)
            if not path.is_file():
                errors.append(f"corpora.{index}.path: file not found: {path}")
    return errors


def resolve_path(path: str, base_dir: Path) -> Path:
    candidate = Path(path).expanduser()
    return candidate if candidate.is_absolute() else (base_dir / candidate)


def _semantic_errors(config: ExperimentConfig) -> List[str]:
    errors = []
    if config.data.min_chars > config.data.max_chars:
        errors.append(f"data: min_chars ({config.data.min_chars}) exceeds max_chars ({config.data.max_chars})")
    for key in ("valid_size", "test_size"):
        value = getattr(config.data, key)
        if isinstance(value, float) and value >= 1 and value != int(value):
            errors.append(f"data.{key}: fractions must be < 1, counts must be integers (got {value})")
    fractions = [v for v in (config.data.valid_size, config.data.test_size) if isinstance(v, float) and v < 1]
    if sum(fractions) >= 1:
        errors.append("data: valid_size + test_size leave no training data")

    available = set()
    for corpus in config.corpora:
        if corpus.src_lang == corpus.tgt_lang:
            errors.append(f"corpora: {corpus.path} has identical source and target language {corpus.src_lang!r}")
        available.add((corpus.src_lang, corpus.tgt_lang))
        if corpus.bidirectional:
            available.add((corpus.tgt_lang, corpus.src_lang))
    for index, regime in enumerate(config.regimes):
        missing = [f"{s}->{t}" for s, t in regime.directions() if (s, t) not in available]
        if missing:
            errors.append(f"regimes.{index}: no corpus for direction(s) {', '.join(missing)}")

    for architecture in config.architectures:
        try:
            model = config.model_config(architecture, config.tokenizer.vocab_size)
        except (TypeError, ValueError) as e:
            errors.append(f"model ({architecture.value}): {e}")
            continue
        errors.extend(f"model ({architecture.value}): {e}" for e in model.validate())
    errors.extend(f"train: {e}" for e in config.train.validate())

    edges = list(config.metrics.bucket_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        errors.append(f"metrics.bucket_edges: must be strictly increasing, got {edges}")

    if config.cells == "reduced":
        kept = [(a, r) for a in config.architectures for r in config.regimes if (a, r.regime) in REDUCED_CELLS]
        if not kept:
            errors.append("cells: the 'reduced' filter leaves no architecture x regime cell to run")
    return errors


def validate_config_dict(data: Any, base_dir: Union[str, Path] = ".") -> ExperimentConfig:
    """Validate a parsed config and return it fully resolved, or raise with every error found."""
    base_dir = Path(base_dir)
    errors = _schema_errors(data)
    if isinstance(data, dict):
        errors.extend(_file_errors(data, base_dir))
    if errors:
        raise ConfigValidationError(errors)

    regime_errors = []
    for index, regime in enumerate(data["regimes"]):
        try:
            DirectionConfig.from_dict(regime)
        except ValueError as e:
            regime_errors.append(f"regimes.{index}: {e}")
    if regime_errors:
        raise ConfigValidationError(regime_errors)

    config = ExperimentConfig.from_dict(data)
    config = replace(config, corpora=[
        replace(c, path=str(resolve_path(c.path, base_dir).resolve())) for c in config.corpora
    ])
    errors = _semantic_errors(config)
    if errors:
        raise ConfigValidationError(errors)
    return config


def validate_config(path: Union[str, Path]) -> ExperimentConfig:
    """Load and validate an experiment config file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigValidationError([f"config file not found: {path}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}"]) from None
    return validate_config_dict(data, path.parent)


def apply_overrides(config: ExperimentConfig, seed: Optional[int] = None, output_dir: Optional[str] = None,
                    jobs: Optional[int] = None) -> ExperimentConfig:
    """Command-line overrides of the common experiment settings."""
    changes: Dict[str, Any] = {}
    if seed is not None:
        changes["seed"] = seed
    if output_dir is not None:
        changes["output_dir"] = output_dir
    if jobs is not None:
        if jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {jobs}")
        changes["jobs"] = jobs
    return replace(config, **changes) if changes else config
