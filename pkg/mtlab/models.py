"""Data models for mtlab."""

import csv
import io
import json
from dataclasses import dataclass, field, fields, asdict
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .tensor import IGNORE_INDEX
from .tokenizer import BOS_ID, CONTROL_TOKENS, EOS_ID, PAD_ID


class Architecture(Enum):
    """Transformer layouts under comparison."""
    DECODER_ONLY = "decoder-only"
    ENCODER_DECODER = "encoder-decoder"


class Regime(Enum):
    """Which source-language set maps to which target-language set."""
    ONE_TO_ONE = "one-to-one"
    ONE_TO_MANY = "one-to-many"
    MANY_TO_ONE = "many-to-one"
    MANY_TO_MANY = "many-to-many"


class Mixing(Enum):
    """How multi-direction data is balanced."""
    PROPORTIONAL = "proportional"
    UNIFORM = "uniform"


def _known_fields(cls, data: Dict[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} field(s): {', '.join(unknown)}")
    return dict(data)


# ---------------------------------------------------------------------------
# Corpus and dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SentencePair:
    """One aligned translation pair."""
    src_lang: str
    tgt_lang: str
    src_text: str
    tgt_text: str

    def __post_init__(self):
        if not self.src_text.strip() or not self.tgt_text.strip():
            raise ValueError(f"Sentence pair texts must be non-empty: {self.src_text!r} / {self.tgt_text!r}")
        if self.src_lang == self.tgt_lang:
            raise ValueError(f"Sentence pair languages must differ, got {self.src_lang!r} twice")

    @property
    def direction(self) -> Tuple[str, str]:
        return (self.src_lang, self.tgt_lang)

    def reversed(self) -> "SentencePair":
        return SentencePair(self.tgt_lang, self.src_lang, self.tgt_text, self.src_text)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return asdict(self)


@dataclass(frozen=True)
class DirectionConfig:
    """Direction regime plus the language sets it spans."""
    regime: Regime
    source_langs: Tuple[str, ...]
    target_langs: Tuple[str, ...]
    mixing: Mixing = Mixing.PROPORTIONAL

    def __post_init__(self):
        object.__setattr__(self, "source_langs", tuple(sorted(set(self.source_langs))))
        object.__setattr__(self, "target_langs", tuple(sorted(set(self.target_langs))))
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> List[str]:
        n_src, n_tgt = len(self.source_langs), len(self.target_langs)
        expected = {
            Regime.ONE_TO_ONE: (n_src == 1 and n_tgt == 1, "exactly one source and one target language"),
            Regime.ONE_TO_MANY: (n_src == 1 and n_tgt >= 2, "one source and at least two target languages"),
            Regime.MANY_TO_ONE: (n_src >= 2 and n_tgt == 1, "at least two source and one target language"),
            Regime.MANY_TO_MANY: (n_src >= 2 and n_tgt >= 2, "at least two source and two target languages"),
        }
        ok, requirement = expected[self.regime]
        errors = [] if ok else [
            f"{self.regime.value} needs {requirement}, got sources {list(self.source_langs)} "
            f"and targets {list(self.target_langs)}"
        ]
        if ok and not self.directions():
            errors.append(f"{self.regime.value} has no direction with distinct languages")
        return errors

    def directions(self) -> List[Tuple[str, str]]:
        """Every ordered (source, target) pair with distinct languages."""
        return [(s, t) for s, t in product(self.source_langs, self.target_langs) if s != t]

    @property
    def languages(self) -> List[str]:
        return sorted(set(self.source_langs) | set(self.target_langs))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "regime": self.regime.value,
            "source_langs": list(self.source_langs),
            "target_langs": list(self.target_langs),
            "mixing": self.mixing.value,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DirectionConfig":
        return cls(
            regime=Regime(data["regime"]),
            source_langs=tuple(data["source_langs"]),
            target_langs=tuple(data["target_langs"]),
            mixing=Mixing(data.get("mixing", Mixing.PROPORTIONAL.value)),
        )


@dataclass(frozen=True)
class TrainingExample:
    """Token sequences for one pair, already laid out for an architecture.

    ``decoder_ids`` is the full decoder-side sequence: for DecoderOnly
    ``src + tag + tgt + EOS``, for EncoderDecoder ``BOS + tgt + EOS``.
    ``loss_mask[i]`` marks token ``i`` as a prediction target, so the decoder
    input is ``decoder_ids[:-1]`` and the labels are ``decoder_ids[1:]``.
    """
    architecture: Architecture
    src_lang: str
    tgt_lang: str
    tag_id: int
    decoder_ids: Tuple[int, ...]
    loss_mask: Tuple[bool, ...]
    encoder_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.decoder_ids) != len(self.loss_mask):
            raise ValueError("decoder_ids and loss_mask must have equal length")

    @property
    def decoder_input(self) -> Tuple[int, ...]:
        return self.decoder_ids[:-1]

    @property
    def labels(self) -> Tuple[int, ...]:
        return tuple(
            token if keep else IGNORE_INDEX
            for token, keep in zip(self.decoder_ids[1:], self.loss_mask[1:])
        )

    @property
    def length(self) -> int:
        return max(len(self.decoder_ids), len(self.encoder_ids))


# ---------------------------------------------------------------------------
# Model, training and decoding configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of a TranslationModel."""
    architecture: Architecture
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    n_enc_layers: Optional[int] = None
    n_dec_layers: Optional[int] = None
    d_ff: int = 256
    max_seq_len: int = 128
    dropout_rate: float = 0.0
    seed: int = 0
    tie_embeddings: bool = True
    position_embeddings: bool = True
    layer_norm_eps: float = 1e-5

    @property
    def encoder_layers(self) -> int:
        if self.architecture is Architecture.DECODER_ONLY:
            return 0
        return self.n_layers if self.n_enc_layers is None else self.n_enc_layers

    @property
    def decoder_layers(self) -> int:
        if self.architecture is Architecture.DECODER_ONLY or self.n_dec_layers is None:
            return self.n_layers
        return self.n_dec_layers

    def validate(self) -> List[str]:
        """Return every violated constraint (empty when valid)."""
        errors = []
        if self.d_model < 1 or self.n_heads < 1:
            errors.append(f"d_model ({self.d_model}) and n_heads ({self.n_heads}) must be positive")
        elif self.d_model % self.n_heads:
            errors.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.max_seq_len < 2:
            errors.append(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.vocab_size < len(CONTROL_TOKENS) + 1:
            errors.append(f"vocab_size must be >= {len(CONTROL_TOKENS) + 1}, got {self.vocab_size}")
        for name in ("n_layers", "n_enc_layers", "n_dec_layers"):
            value = getattr(self, name)
            if value is not None and value < 0:
                errors.append(f"{name} must be >= 0, got {value}")
        if self.d_ff < 1:
            errors.append(f"d_ff must be positive, got {self.d_ff}")
        if not 0.0 <= self.dropout_rate < 1.0:
            errors.append(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.layer_norm_eps <= 0:
            errors.append(f"layer_norm_eps must be positive, got {self.layer_norm_eps}")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        data = asdict(self)
        data["architecture"] = self.architecture.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = _known_fields(cls, data)
        data["architecture"] = Architecture(data["architecture"])
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings."""
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: Optional[float] = 1.0
    batch_size: int = 16
    max_steps: int = 1000
    warmup_steps: int = 100
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 10
    record_wall_clock: bool = False

    def validate(self) -> List[str]:
        errors = []
        if self.learning_rate <= 0:
            errors.append(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                errors.append(f"{name} must lie in [0, 1), got {value}")
        if self.adam_eps <= 0:
            errors.append(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            errors.append(f"grad_clip_norm must be > 0 when set, got {self.grad_clip_norm}")
        if self.max_steps < 1:
            errors.append(f"max_steps must be >= 1, got {self.max_steps}")
        if self.batch_size < 1:
            errors.append(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("warmup_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.log_every < 1:
            errors.append(f"log_every must be >= 1, got {self.log_every}")
        return errors

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return cls(**_known_fields(cls, data))


@dataclass(frozen=True)
class GenerationConfig:
    """Decoding settings; beam score is logprob / len**length_penalty."""
    max_new_tokens: int = 64
    beam_width: int = 4
    length_penalty: float = 0.6
    stop_ids: Tuple[int, ...] = (EOS_ID,)
    banned_ids: Tuple[int, ...] = (PAD_ID, BOS_ID)

    def __post_init__(self):
        object.__setattr__(self, "stop_ids", tuple(self.stop_ids))
        object.__setattr__(self, "banned_ids", tuple(self.banned_ids))
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.length_penalty < 0:
            raise ValueError(f"length_penalty must be >= 0, got {self.length_penalty}")

    def with_stops(self, *extra: int) -> "GenerationConfig":
        stops = tuple(dict.fromkeys(self.stop_ids + tuple(extra)))
        return GenerationConfig(self.max_new_tokens, self.beam_width, self.length_penalty, stops, self.banned_ids)

    def provenance(self) -> str:
        mode = "greedy" if self.beam_width == 1 else f"beam={self.beam_width}"
        return f"{mode} alpha={self.length_penalty} max_new_tokens={self.max_new_tokens}"

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "max_new_tokens": self.max_new_tokens,
            "beam_width": self.beam_width,
            "length_penalty": self.length_penalty,
            "stop_ids": list(self.stop_ids),
            "banned_ids": list(self.banned_ids),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GenerationConfig":
        data = _known_fields(cls, data)
        for key in ("stop_ids", "banned_ids"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------

LOSS_LOG_HEADER = ("step", "train_loss", "val_loss", "seconds")


@dataclass(frozen=True)
class LossRecord:
    step: int
    train_loss: float
    val_loss: Optional[float] = None
    seconds: Optional[float] = None


@dataclass
class LossLog:
    """Training-loss trace with strictly increasing steps."""
    records: List[LossRecord] = field(default_factory=list)

    def append(self, record: LossRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"Loss log steps must increase: {record.step} after {self.records[-1].step}")
        self.records.append(record)

    def extend(self, other: "LossLog") -> None:
        for record in other.records:
            self.append(record)

    @property
    def last(self) -> Optional[LossRecord]:
        return self.records[-1] if self.records else None

    def to_csv(self, include_seconds: bool = True) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(LOSS_LOG_HEADER)
        for r in self.records:
            writer.writerow([
                r.step,
                repr(r.train_loss),
                "" if r.val_loss is None else repr(r.val_loss),
                "" if (r.seconds is None or not include_seconds) else f"{r.seconds:.3f}",
            ])
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path], include_seconds: bool = True) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(include_seconds), encoding="utf-8")
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "LossLog":
        log = cls()
        with open(path, "r", encoding="utf-8", newline="") as f:
            for row in csv.DictReader(f):
                log.append(LossRecord(
                    step=int(row["step"]),
                    train_loss=float(row["train_loss"]),
                    val_loss=float(row["val_loss"]) if row["val_loss"] else None,
                    seconds=float(row["seconds"]) if row["seconds"] else None,
                ))
        return log


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------

@dataclass
class BucketReport:
    """Scores for test segments whose source length falls in [lower, upper)."""
    index: int
    lower: int
    upper: Optional[int]
    n_segments: int
    bleu: Optional[float] = None
    chrf: Optional[float] = None
    ter: Optional[float] = None

    @property
    def label(self) -> str:
        return f"{self.lower}+" if self.upper is None else f"{self.lower}-{self.upper - 1}"

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        data = asdict(self)
        data["label"] = self.label
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BucketReport":
        data = {k: v for k, v in data.items() if k != "label"}
        return cls(**data)


@dataclass
class MetricReport:
    """Corpus scores for one translation direction."""
    direction: str
    bleu: float
    chrf: float
    ter: float
    n_segments: int
    n_ref_tokens: int
    buckets: List[BucketReport] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        if not (0.0 <= self.bleu <= 100.0 and 0.0 <= self.chrf <= 100.0 and self.ter >= 0.0):
            raise ValueError(f"Scores out of range: bleu={self.bleu} chrf={self.chrf} ter={self.ter}")

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "direction": self.direction,
            "bleu": self.bleu,
            "chrf": self.chrf,
            "ter": self.ter,
            "n_segments": self.n_segments,
            "n_ref_tokens": self.n_ref_tokens,
            "buckets": [b.to_dict() for b in self.buckets],
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        """Convert to JSON string."""
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricReport":
        return cls(
            direction=data["direction"],
            bleu=data["bleu"],
            chrf=data["chrf"],
            ter=data["ter"],
            n_segments=data["n_segments"],
            n_ref_tokens=data["n_ref_tokens"],
            buckets=[BucketReport.from_dict(b) for b in data.get("buckets", [])],
            provenance=data.get("provenance", ""),
        )


# ---------------------------------------------------------------------------
# Experiment configuration and run records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSpec:
    """A `src<TAB>tgt` corpus file and the languages of its columns."""
    path: str
    src_lang: str
    tgt_lang: str
    bidirectional: bool = False

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return asdict(self)


@dataclass(frozen=True)
class DataOptions:
    min_chars: int = 40
    max_chars: int = 200
    valid_size: float = 0.0
    test_size: float = 0.1
    skip_bad: bool = False
    eval_on_train: bool = False

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return asdict(self)


@dataclass(frozen=True)
class TokenizerSpec:
    vocab_size: int = 1000
    extra_specials: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {"vocab_size": self.vocab_size, "extra_specials": list(self.extra_specials)}


@dataclass(frozen=True)
class MetricOptions:
    bucket_edges: Tuple[int, ...] = ()
    bleu_smoothing: str = "none"

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {"bucket_edges": list(self.bucket_edges), "bleu_smoothing": self.bleu_smoothing}


@dataclass(frozen=True)
class RunSpec:
    """One cell of an experiment: an architecture trained on one direction regime."""
    name: str
    architecture: Architecture
    directions: DirectionConfig
    seed: int = 0


@dataclass
class ExperimentConfig:
    """Fully resolved experiment description."""
    name: str
    corpora: List[CorpusSpec]
    regimes: List[DirectionConfig]
    architectures: List[Architecture] = field(default_factory=lambda: [Architecture.DECODER_ONLY])
    cells: str = "full"
    seed: int = 0
    output_dir: str = "runs"
    jobs: int = 1
    data: DataOptions = field(default_factory=DataOptions)
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)
    model: Dict[str, Any] = field(default_factory=dict)
    model_overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)

    @property
    def languages(self) -> List[str]:
        langs = set()
        for corpus in self.corpora:
            langs.update((corpus.src_lang, corpus.tgt_lang))
        for regime in self.regimes:
            langs.update(regime.languages)
        return sorted(langs)

    def model_config(self, architecture: Architecture, vocab_size: int) -> ModelConfig:
        """ModelConfig for ``architecture``: shared settings, then per-architecture overrides."""
        settings = dict(self.model)
        settings.update(self.model_overrides.get(architecture.value, {}))
        settings.update(architecture=architecture.value, vocab_size=vocab_size, seed=self.seed)
        return ModelConfig.from_dict(settings)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.train.to_dict(), "seed": self.seed})

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "jobs": self.jobs,
            "corpora": [c.to_dict() for c in self.corpora],
            "data": self.data.to_dict(),
            "tokenizer": self.tokenizer.to_dict(),
            "architectures": [a.value for a in self.architectures],
            "regimes": [r.to_dict() for r in self.regimes],
            "cells": self.cells,
            "model": dict(self.model),
            "model_overrides": {k: dict(v) for k, v in self.model_overrides.items()},
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "generation": {
                k: v for k, v in self.generation.to_dict().items()
                if k in ("max_new_tokens", "beam_width", "length_penalty")
            },
            "metrics": self.metrics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        return cls(
            name=data["name"],
            seed=data.get("seed", 0),
            output_dir=data.get("output_dir", "runs"),
            jobs=data.get("jobs", 1),
            corpora=[CorpusSpec(**c) for c in data["corpora"]],
            data=DataOptions(**data.get("data", {})),
            tokenizer=TokenizerSpec(
                vocab_size=data.get("tokenizer", {}).get("vocab_size", TokenizerSpec.vocab_size),
                extra_specials=tuple(data.get("tokenizer", {}).get("extra_specials", ())),
            ),
            architectures=[Architecture(a) for a in data.get("architectures", [Architecture.DECODER_ONLY.value])],
            regimes=[DirectionConfig.from_dict(r) for r in data["regimes"]],
            cells=data.get("cells", "full"),
            model=dict(data.get("model", {})),
            model_overrides={k: dict(v) for k, v in data.get("model_overrides", {}).items()},
            train=TrainConfig.from_dict(data.get("train", {})),
            generation=GenerationConfig.from_dict(data.get("generation", {})),
            metrics=MetricOptions(
                bucket_edges=tuple(data.get("metrics", {}).get("bucket_edges", ())),
                bleu_smoothing=data.get("metrics", {}).get("bleu_smoothing", "none"),
            ),
        )


@dataclass
class RunRecord:
    """Everything a finished (or failed) run left on disk."""
    name: str
    architecture: str
    regime: str
    run_dir: str
    experiment: str = ""
    seed: int = 0
    status: str = "pending"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    config_path: Optional[str] = None
    tokenizer_path: Optional[str] = None
    checkpoints: List[str] = field(default_factory=list)
    loss_log_path: Optional[str] = None
    metrics_path: Optional[str] = None
    segments: Dict[str, Dict[str, str]] = field(default_factory=dict)
    environment: Dict[str, Any] = field(default_factory=dict)

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for serialization."""
        return asdict(self)

    def to_json(self) -> str:
        """Convert to JSON string."""
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(**_known_fields(cls, data))
