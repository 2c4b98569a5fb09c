"""Experiment orchestration: data, tokenizer, and one training run per matrix cell."""

import logging
import platform
import shutil
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .data import DataSplit, build_direction_dataset, filter_by_length, load_corpus, split_pairs
from .errors import StageError
from .exporter import RunExporter, load_config_snapshot, load_run_record
from .metrics import run_evaluation
from .models import (
    Architecture,
    DirectionConfig,
    ExperimentConfig,
    Mixing,
    RunRecord,
    RunSpec,
    SentencePair,
)
from .presets import REDUCED_CELLS
from .tokenizer import SubwordTokenizer, language_tag, train_bpe
from .trainer import FINAL_CHECKPOINT, train
from .transformer import build_model, count_parameters

logger = logging.getLogger(__name__)

Direction = Tuple[str, str]


@contextmanager
def stage(name: str) -> Iterator[None]:
    """Re-raise any failure inside the block as a StageError naming ``name``."""
    logger.debug(f"Entering stage '{name}'")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {e}")
        raise StageError(name, e) from e


def _regime_labels(regimes: Sequence[DirectionConfig]) -> List[str]:
    counts = Counter(r.regime.value for r in regimes)
    labels = []
    for index, regime in enumerate(regimes):
        label = regime.regime.value
        labels.append(f"{label}-{index}" if counts[label] > 1 else label)
    return labels


def run_name(experiment: str, architecture: Architecture, regime_label: str, seed: int) -> str:
    return f"{experiment}__{architecture.value}__{regime_label}__seed{seed}"


def expand_matrix(config: ExperimentConfig) -> List[RunSpec]:
    """
    Expand architectures x regimes into one RunSpec per cell.

    With ``cells == "reduced"`` only the six combinations in ``REDUCED_CELLS``
    survive.

    Args:
        config: Validated experiment config

    Returns:
        List of RunSpec objects, architectures outermost
    """
    labels = _regime_labels(config.regimes)
    specs = []
    for architecture in config.architectures:
        for label, regime in zip(labels, config.regimes):
            if config.cells == "reduced" and (architecture, regime.regime) not in REDUCED_CELLS:
                logger.debug(f"Skipping {architecture.value} x {label}: not in the reduced matrix")
                continue
            specs.append(RunSpec(
                name=run_name(config.name, architecture, label, config.seed),
                architecture=architecture,
                directions=regime,
                seed=config.seed,
            ))
    return specs


def prepare_data(config: ExperimentConfig) -> Dict[Direction, DataSplit]:
    """
    Load, filter and split every corpus of the experiment.

    Splits are seeded by the experiment seed alone, so every cell sees the
    same train/valid/test pairs. A bidirectional corpus is split once and its
    reverse reuses that split.

    Returns:
        Dict mapping (src_lang, tgt_lang) to its DataSplit
    """
    splits: Dict[Direction, DataSplit] = {}

    def add(direction: Direction, split: DataSplit) -> None:
        if direction in splits:
            existing = splits[direction]
            split = DataSplit(existing.train + split.train, existing.valid + split.valid,
                              existing.test + split.test)
        splits[direction] = split

    for corpus in config.corpora:
        pairs = load_corpus(corpus.path, corpus.src_lang, corpus.tgt_lang, skip_bad=config.data.skip_bad)
        pairs = filter_by_length(pairs, config.data.min_chars, config.data.max_chars)
        if not pairs:
            raise ValueError(f"No pairs left in {corpus.path} after length filtering "
                             f"[{config.data.min_chars}, {config.data.max_chars}]")
        split = split_pairs(pairs, config.data.valid_size, config.data.test_size, seed=config.seed)
        logger.info(f"{corpus.src_lang}-{corpus.tgt_lang}: {len(split.train)} train, "
                    f"{len(split.valid)} valid, {len(split.test)} test")
        add((corpus.src_lang, corpus.tgt_lang), split)
        if corpus.bidirectional:
            add((corpus.tgt_lang, corpus.src_lang), DataSplit(
                train=[p.reversed() for p in split.train],
                valid=[p.reversed() for p in split.valid],
                test=[p.reversed() for p in split.test],
            ))
    return splits


def tokenizer_corpus(splits: Mapping[Direction, DataSplit]) -> List[str]:
    """Training-split texts of both sides, deduplicated in first-seen order."""
    seen = set()
    texts = []
    for direction in sorted(splits):
        for pair in splits[direction].train:
            for text in (pair.src_text, pair.tgt_text):
                if text not in seen:
                    seen.add(text)
                    texts.append(text)
    return texts


def train_experiment_tokenizer(config: ExperimentConfig, splits: Mapping[Direction, DataSplit]) -> SubwordTokenizer:
    """One tokenizer shared by every cell, with a tag for each experiment language."""
    specials = [language_tag(lang) for lang in config.languages] + list(config.tokenizer.extra_specials)
    tokenizer = train_bpe(tokenizer_corpus(splits), config.tokenizer.vocab_size, specials)
    logger.info(f"Trained shared tokenizer: {tokenizer.vocab_size} tokens, languages {tokenizer.languages}")
    return tokenizer


def _direction_pairs(splits: Mapping[Direction, DataSplit], directions: Sequence[Direction],
                     part: str) -> Dict[Direction, List[SentencePair]]:
    return {d: list(getattr(splits[d], part)) for d in directions if d in splits}


def _environment(config: ExperimentConfig) -> Dict[str, object]:
    return {
        "mtlab_version": __version__,
        "seed": config.seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _snapshot(config: ExperimentConfig, spec: RunSpec, vocab_size: int) -> Dict[str, object]:
    model_config = config.model_config(spec.architecture, vocab_size)
    return {
        **config.to_dict(),
        "run": {
            "name": spec.name,
            "architecture": spec.architecture.value,
            "directions": spec.directions.to_dict(),
        },
        "resolved": {
            "model": model_config.to_dict(),
            "train": config.train_config().to_dict(),
            "generation": config.generation.to_dict(),
        },
    }


def evaluate_directions(model, tokenizer: SubwordTokenizer, config: ExperimentConfig,
                        pairs: Mapping[Direction, Sequence[SentencePair]], exporter: RunExporter,
                        record: RunRecord) -> None:
    """Translate and score every direction, storing segments and metrics.json."""
    reports = []
    for (src, tgt), test_pairs in pairs.items():
        if not test_pairs:
            raise ValueError(f"No evaluation pairs for direction {src}-{tgt}")
        result = run_evaluation(
            model,
            test_pairs,
            tgt,
            tokenizer,
            config.generation,
            bucket_edges=config.metrics.bucket_edges,
            smoothing=config.metrics.bleu_smoothing,
        )
        direction = result.report.direction
        record.segments[direction] = exporter.export_segments(
            direction, result.sources, result.hypotheses, result.references
        )
        reports.append(result.report)
    record.metrics_path = str(exporter.export_metrics(reports))


def run_cell(spec: RunSpec, config: ExperimentConfig, splits: Mapping[Direction, DataSplit],
             tokenizer_text: str, evaluate: bool = True) -> RunRecord:
    """
    Train (and evaluate) one matrix cell inside its own run directory.

    A failing stage is recorded in the returned RunRecord rather than raised,
    so one broken cell does not stop its siblings.

    Args:
        spec: Cell to run
        config: Experiment config
        splits: Per-direction data splits shared by every cell
        tokenizer_text: Serialized shared tokenizer
        evaluate: Score the trained model on the evaluation split

    Returns:
        The RunRecord, also written to ``run_record.json``
    """
    started = time.perf_counter()
    exporter = RunExporter(Path(config.output_dir) / spec.name)
    record = RunRecord(
        name=spec.name,
        architecture=spec.architecture.value,
        regime=spec.directions.regime.value,
        run_dir=str(exporter.run_dir),
        experiment=config.name,
        seed=spec.seed,
        status="running",
        environment=_environment(config),
    )
    directions = spec.directions.directions()
    try:
        with stage("tokenizer"):
            tokenizer = SubwordTokenizer.from_text(tokenizer_text)
            record.tokenizer_path = str(tokenizer.save(exporter.tokenizer_path))
            record.config_path = str(exporter.export_config(_snapshot(config, spec, tokenizer.vocab_size)))

        with stage("dataset"):
            model_config = config.model_config(spec.architecture, tokenizer.vocab_size)
            dataset = build_direction_dataset(
                _direction_pairs(splits, directions, "train"), spec.directions, tokenizer,
                spec.architecture, model_config.max_seq_len, seed=spec.seed,
            )
            valid = _direction_pairs(splits, directions, "valid")
            eval_set = None
            if any(valid.values()):
                eval_set = build_direction_dataset(
                    valid, replace(spec.directions, mixing=Mixing.PROPORTIONAL), tokenizer,
                    spec.architecture, model_config.max_seq_len, seed=spec.seed,
                )

        with stage("model"):
            model = build_model(model_config)
            record.environment["parameters"] = count_parameters(model)

        with stage("train"):
            tc = config.train_config()
            result = train(
                model, dataset, tc, eval_set=eval_set, checkpoint_dir=exporter.checkpoint_dir,
                metadata={"run": spec.name, "tokenizer": exporter.tokenizer_path.name},
            )
            record.checkpoints = [str(p) for p in result.checkpoints]
            record.loss_log_path = str(exporter.export_loss_log(result.loss_log, tc.record_wall_clock))

        if evaluate:
            with stage("evaluate"):
                part = "train" if config.data.eval_on_train else "test"
                evaluate_directions(model, tokenizer, config, _direction_pairs(splits, directions, part),
                                    exporter, record)
            record.status = "completed"
        else:
            record.status = "trained"
    except StageError as e:
        record.status = "failed"
        record.failed_stage = e.stage
        record.error = str(e.cause)
    record.environment["wall_clock_seconds"] = round(time.perf_counter() - started, 3)
    exporter.export_run_record(record)
    logger.info(f"Run {spec.name}: {record.status}"
                + (f" at stage '{record.failed_stage}'" if record.failed_stage else ""))
    return record


def _claim_run_dirs(config: ExperimentConfig, specs: Sequence[RunSpec], overwrite: bool) -> None:
    taken = [s.name for s in specs if (Path(config.output_dir) / s.name).exists()]
    if taken and not overwrite:
        raise FileExistsError(
            f"Run director{'y' if len(taken) == 1 else 'ies'} already exist in {config.output_dir}: "
            f"{', '.join(taken)} (use overwrite to replace)"
        )
    for name in taken:
        shutil.rmtree(Path(config.output_dir) / name)


def run_experiment(config: ExperimentConfig, overwrite: bool = False, evaluate: bool = True,
                   specs: Optional[Sequence[RunSpec]] = None) -> List[RunRecord]:
    """
    Run every cell of an experiment end to end.

    The shared stages (data, tokenizer) run once; their failure raises
    StageError. Cells run in up to ``config.jobs`` worker processes and
    record their own failures.

    Args:
        config: Validated experiment config
        overwrite: Replace existing run directories instead of refusing
        evaluate: Score each trained model (``False`` stops after training)
        specs: Cells to run; defaults to the expanded matrix

    Returns:
        RunRecords in matrix order
    """
    specs = list(specs) if specs is not None else expand_matrix(config)
    if not specs:
        raise ValueError(f"Experiment '{config.name}' has no cells to run")
    _claim_run_dirs(config, specs, overwrite)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)

    with stage("data"):
        splits = prepare_data(config)
    with stage("tokenizer"):
        tokenizer_text = train_experiment_tokenizer(config, splits).to_text()

    logger.info(f"Running {len(specs)} cell(s) of '{config.name}' with {config.jobs} job(s)")
    if config.jobs == 1 or len(specs) == 1:
        return [run_cell(spec, config, splits, tokenizer_text, evaluate) for spec in specs]
    with ProcessPoolExecutor(max_workers=min(config.jobs, len(specs))) as pool:
        futures = [pool.submit(run_cell, spec, config, splits, tokenizer_text, evaluate) for spec in specs]
        return [f.result() for f in futures]


def evaluate_run(run_dir, pairs: Optional[Mapping[Direction, Sequence[SentencePair]]] = None) -> RunRecord:
    """
    Evaluate the final checkpoint of a trained run.

    Without ``pairs`` the run's own evaluation split is rebuilt from its
    config snapshot. Metrics and segments in the run directory are replaced.
    """
    exporter = RunExporter(run_dir)
    record = load_run_record(run_dir)
    snapshot = load_config_snapshot(run_dir)
    config = ExperimentConfig.from_dict(snapshot)
    directions = DirectionConfig.from_dict(snapshot["run"]["directions"])
    try:
        with stage("evaluate"):
            tokenizer = SubwordTokenizer.load(exporter.tokenizer_path)
            model = load_checkpoint(exporter.checkpoint_dir / FINAL_CHECKPOINT).build_model()
            if pairs is None:
                part = "train" if config.data.eval_on_train else "test"
                pairs = _direction_pairs(prepare_data(config), directions.directions(), part)
            record.segments = {}
            evaluate_directions(model, tokenizer, config, pairs, exporter, record)
        record.status = "completed"
        record.failed_stage = None
        record.error = None
    except StageError as e:
        record.status = "failed"
        record.failed_stage = e.stage
        record.error = str(e.cause)
    exporter.export_run_record(record)
    return record

