"""
mtlab - A desk-scale laboratory for multilingual machine translation.

This package provides tools to:
1. Train a shared BPE tokenizer with language-tag tokens
2. Train parameter-matched decoder-only and encoder-decoder transformers from scratch
3. Run architecture x direction-regime experiment matrices with reproducible run records
4. Score translations with BLEU, chrF and TER, and evaluate few-shot prompting
"""

__version__ = "0.1.0"
__author__ = "mtlab Team"

from .models import (
    Architecture,
    DirectionConfig,
    ExperimentConfig,
    GenerationConfig,
    MetricReport,
    ModelConfig,
    Regime,
    RunRecord,
    SentencePair,
    TrainConfig,
)
from .tokenizer import SubwordTokenizer, train_bpe
from .transformer import TranslationModel, build_model, count_parameters
from .experiment import run_experiment
from .config import validate_config

__all__ = [
    "Architecture",
    "DirectionConfig",
    "ExperimentConfig",
    "GenerationConfig",
    "MetricReport",
    "ModelConfig",
    "Regime",
    "RunRecord",
    "SentencePair",
    "TrainConfig",
    "SubwordTokenizer",
    "train_bpe",
    "TranslationModel",
    "build_model",
    "count_parameters",
    "run_experiment",
    "validate_config",
]
