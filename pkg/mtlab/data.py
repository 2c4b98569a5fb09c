"""Corpus ingestion, direction datasets and padded batches."""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CorpusFormatError
from .models import Architecture, DirectionConfig, Mixing, SentencePair, TrainingExample
from .tensor import IGNORE_INDEX
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, SubwordTokenizer, language_tag

logger = logging.getLogger(__name__)

Direction = Tuple[str, str]


def load_corpus(path: Union[str, Path], src_lang: str, tgt_lang: str, skip_bad: bool = False) -> List[SentencePair]:
    """Read a UTF-8 ``src<TAB>tgt`` file, one pair per line, in file order.

    A line without exactly one TAB, or with an empty side, raises
    ``CorpusFormatError`` naming its line number; with ``skip_bad`` it is
    logged and skipped instead.
    """
    language_tag(src_lang)
    language_tag(tgt_lang)
    path = Path(path)
    try:
        content = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise CorpusFormatError(f"{path} is not valid UTF-8: {e}") from e

    if not content:
        logger.warning(f"Corpus {path} is empty")
        return []

    lines = content.split("\n")
    if lines[-1] == "":
        lines.pop()

    pairs: List[SentencePair] = []
    skipped = 0
    for line_number, line in enumerate(lines, start=1):
        line = line.rstrip("\r")
        fields = line.split("\t")
        problem = None
        if len(fields) != 2:
            problem = f"expected 'src<TAB>tgt', found {len(fields) - 1} TAB(s)"
        elif not fields[0].strip() or not fields[1].strip():
            problem = "empty source or target text"
        if problem is not None:
            if not skip_bad:
                raise CorpusFormatError(f"{path}: line {line_number}: {problem}", line_number)
            logger.warning(f"Skipping {path}: line {line_number}: {problem}")
            skipped += 1
            continue
        pairs.append(SentencePair(src_lang, tgt_lang, fields[0], fields[1]))

    suffix = f" ({skipped} skipped)" if skipped else ""
    logger.info(f"Loaded {len(pairs)} {src_lang}-{tgt_lang} pairs from {path}{suffix}")
    return pairs


def filter_by_length(pairs: Sequence[SentencePair], min_chars: int = 40, max_chars: float = 200) -> List[SentencePair]:
    """Keep pairs whose source AND target character counts lie in [min_chars, max_chars]."""
    if not 0 <= min_chars <= max_chars:
        raise ValueError(f"Need 0 <= min_chars <= max_chars, got {min_chars} and {max_chars}")
    kept = [
        p for p in pairs
        if min_chars <= len(p.src_text) <= max_chars and min_chars <= len(p.tgt_text) <= max_chars
    ]
    if len(kept) < len(pairs):
        logger.info(f"Length filter [{min_chars}, {max_chars}] kept {len(kept)} of {len(pairs)} pairs")
    return kept


@dataclass
class DataSplit:
    train: List[SentencePair]
    valid: List[SentencePair]
    test: List[SentencePair]


def _split_count(size: float, total: int, what: str) -> int:
    if size < 0:
        raise ValueError(f"{what} must be >= 0, got {size}")
    if isinstance(size, float) and size < 1:
        return int(round(size * total))
    return int(size)


def split_pairs(pairs: Sequence[SentencePair], valid_size: float = 0.0, test_size: float = 0.1,
                seed: int = 0) -> DataSplit:
    """Seeded train/valid/test split; sizes are fractions (< 1) or absolute counts.

    Each part keeps the corpus order of its pairs.
    """
    total = len(pairs)
    n_test = _split_count(test_size, total, "test_size")
    n_valid = _split_count(valid_size, total, "valid_size")
    if n_test + n_valid >= total:
        raise ValueError(f"Split leaves no training data: {total} pairs, {n_valid} valid, {n_test} test")
    order = np.random.default_rng(seed).permutation(total)
    test_idx = sorted(order[:n_test])
    valid_idx = sorted(order[n_test:n_test + n_valid])
    train_idx = sorted(order[n_test + n_valid:])
    return DataSplit(
        train=[pairs[i] for i in train_idx],
        valid=[pairs[i] for i in valid_idx],
        test=[pairs[i] for i in test_idx],
    )


def encode_example(pair: SentencePair, tokenizer: SubwordTokenizer, architecture: Architecture) -> TrainingExample:
    """Lay out one pair for ``architecture`` with the target-language tag.

    DecoderOnly: ``src + tag + tgt + EOS``, loss on the tokens after the tag.
    EncoderDecoder: encoder ``tag + src + EOS``, decoder ``BOS + tgt + EOS``.
    """
    tag = tokenizer.tag_id(pair.tgt_lang)
    src = tokenizer.encode(pair.src_text)
    tgt = tokenizer.encode(pair.tgt_text)
    if architecture is Architecture.DECODER_ONLY:
        decoder_ids = tuple(src) + (tag,) + tuple(tgt) + (EOS_ID,)
        loss_mask = (False,) * (len(src) + 1) + (True,) * (len(tgt) + 1)
        return TrainingExample(architecture, pair.src_lang, pair.tgt_lang, tag, decoder_ids, loss_mask)
    decoder_ids = (BOS_ID,) + tuple(tgt) + (EOS_ID,)
    loss_mask = (False,) + (True,) * (len(tgt) + 1)
    encoder_ids = (tag,) + tuple(src) + (EOS_ID,)
    return TrainingExample(architecture, pair.src_lang, pair.tgt_lang, tag, decoder_ids, loss_mask, encoder_ids)


@dataclass
class DirectionDataset:
    """Tagged examples for every direction of a regime, interleaved."""
    examples: List[TrainingExample]
    dropped: int = 0
    per_direction: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[TrainingExample]:
        return iter(self.examples)

    def __getitem__(self, index: int) -> TrainingExample:
        return self.examples[index]

    def tag_counts(self) -> Counter:
        return Counter(e.tag_id for e in self.examples)


def build_direction_dataset(
    corpora: Mapping[Direction, Sequence[SentencePair]],
    dc: DirectionConfig,
    tokenizer: SubwordTokenizer,
    architecture: Architecture,
    max_seq_len: int,
    seed: int = 0,
) -> DirectionDataset:
    """Encode every direction ``dc`` implies and shuffle them together.

    Over-length examples are dropped and counted, never truncated. Uniform
    mixing resamples smaller directions (with replacement) up to the size of
    the largest one.
    """
    directions = dc.directions()
    missing = [f"{s}->{t}" for s, t in directions if (s, t) not in corpora]
    if missing:
        raise ValueError(f"No corpus for direction(s) {', '.join(missing)}; available: "
                         f"{', '.join(f'{s}->{t}' for s, t in sorted(corpora)) or 'none'}")
    for _, tgt in directions:
        tokenizer.tag_id(tgt)

    rng = np.random.default_rng(seed)
    per_direction: Dict[Direction, List[TrainingExample]] = {}
    dropped = 0
    for src, tgt in directions:
        kept = []
        for pair in corpora[(src, tgt)]:
            example = encode_example(pair, tokenizer, architecture)
            if example.length > max_seq_len:
                dropped += 1
                continue
            kept.append(example)
        per_direction[(src, tgt)] = kept

    if dc.mixing is Mixing.UNIFORM:
        largest = max(len(v) for v in per_direction.values())
        for direction, items in per_direction.items():
            if items and len(items) < largest:
                extra = rng.choice(len(items), size=largest - len(items), replace=True)
                per_direction[direction] = items + [items[i] for i in extra]

    examples = [e for direction in directions for e in per_direction[direction]]
    examples = [examples[i] for i in rng.permutation(len(examples))]
    counts = {f"{s}-{t}": len(per_direction[(s, t)]) for s, t in directions}
    if dropped:
        logger.info(f"Dropped {dropped} examples longer than max_seq_len={max_seq_len}")
    logger.info(f"Built {dc.regime.value} dataset for {architecture.value}: {len(examples)} examples {counts}")
    return DirectionDataset(examples=examples, dropped=dropped, per_direction=counts)


@dataclass(frozen=True)
class Batch:
    """Right-padded arrays for one optimizer step.

    ``labels`` holds ``IGNORE_INDEX`` at padding and non-target positions,
    and ``*_lengths`` give the real length of each row (pads are hidden keys).
    """
    architecture: Architecture
    decoder_input: np.ndarray
    decoder_lengths: np.ndarray
    labels: np.ndarray
    encoder_input: Optional[np.ndarray] = None
    encoder_lengths: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(self.decoder_input.shape[0])

    @property
    def decoder_mask(self) -> np.ndarray:
        return np.arange(self.decoder_input.shape[1])[None, :] < self.decoder_lengths[:, None]

    @property
    def loss_mask(self) -> np.ndarray:
        return self.labels != IGNORE_INDEX

    @property
    def n_target_tokens(self) -> int:
        return int(self.loss_mask.sum())

    def pad_to(self, width: int, pad_id: int = PAD_ID) -> "Batch":
        """The same batch with extra all-pad decoder columns up to ``width``."""
        extra = width - self.decoder_input.shape[1]
        if extra < 0:
            raise ValueError(f"Cannot pad a batch of width {self.decoder_input.shape[1]} down to {width}")
        return Batch(
            architecture=self.architecture,
            decoder_input=np.pad(self.decoder_input, ((0, 0), (0, extra)), constant_values=pad_id),
            decoder_lengths=self.decoder_lengths,
            labels=np.pad(self.labels, ((0, 0), (0, extra)), constant_values=IGNORE_INDEX),
            encoder_input=self.encoder_input,
            encoder_lengths=self.encoder_lengths,
        )


def _pad_rows(rows: Sequence[Sequence[int]], fill: int) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    out = np.full((len(rows), int(lengths.max())), fill, dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out, lengths


def collate(examples: Sequence[TrainingExample], pad_id: int = PAD_ID) -> Batch:
    """Pad ``examples`` to the longest one in the group."""
    architectures = {e.architecture for e in examples}
    if len(architectures) != 1:
        raise ValueError("A batch must hold examples of exactly one architecture")
    architecture = architectures.pop()
    decoder_input, decoder_lengths = _pad_rows([e.decoder_input for e in examples], pad_id)
    labels, _ = _pad_rows([e.labels for e in examples], IGNORE_INDEX)
    encoder_input = encoder_lengths = None
    if architecture is Architecture.ENCODER_DECODER:
        encoder_input, encoder_lengths = _pad_rows([e.encoder_ids for e in examples], pad_id)
    return Batch(architecture, decoder_input, decoder_lengths, labels, encoder_input, encoder_lengths)


def make_batches(examples: Sequence[TrainingExample], batch_size: int, pad_id: int = PAD_ID,
                 seed: int = 0, epoch: int = 0, shuffle: bool = True) -> List[Batch]:
    """Shuffle (seeded per epoch) and cut ``examples`` into padded batches."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not examples:
        return []
    order = np.random.default_rng([seed, epoch]).permutation(len(examples)) if shuffle else np.arange(len(examples))
    return [
        collate([examples[i] for i in order[start:start + batch_size]], pad_id)
        for start in range(0, len(examples), batch_size)
    ]


def batches_per_epoch(n_examples: int, batch_size: int) -> int:
    return math.ceil(n_examples / batch_size)
