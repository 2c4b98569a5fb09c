"""Shared fixtures for the mtlab test suite."""

from typing import Dict, List, Sequence

import numpy as np
import pytest

from mtlab.models import Architecture, ModelConfig, SentencePair
from mtlab.tokenizer import EOS_ID, language_tag, train_bpe
from mtlab.toydata import make_pairs, make_parallel


class ScriptedScorer:
    """Scorer whose next-token distribution is a fixed function of the prefix.

    ``table`` maps a prefix (tuple of generated ids) to a log-probability row;
    prefixes missing from it get ``default``. With ``seed`` set, missing rows
    are drawn from a seeded generator instead.
    """

    def __init__(self, vocab_size: int, table: Dict[tuple, np.ndarray] = None, default: np.ndarray = None,
                 seed: int = None, room: int = 100, start: Sequence[int] = ()):
        self._vocab_size = vocab_size
        self.table = dict(table or {})
        self.default = default
        self.seed = seed
        self.room = room
        self.start = list(start)
        self.calls = 0

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def decoder_start(self) -> List[int]:
        return list(self.start)

    def generation_room(self, conditioning: Sequence[int]) -> int:
        return self.room

    def row(self, prefix: Sequence[int]) -> np.ndarray:
        key = tuple(prefix[len(self.start):])
        if key in self.table:
            return self.table[key]
        if self.seed is not None:
            logits = np.random.default_rng([self.seed, len(key), *key]).normal(size=self._vocab_size) * 2.0
            return logits - np.log(np.exp(logits).sum())
        return self.default

    def next_token_logprobs(self, conditioning: Sequence[int], prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        self.calls += 1
        return np.stack([self.row(p) for p in prefixes]) if prefixes else np.zeros((0, self._vocab_size))


def one_hot_logprobs(vocab_size: int, token: int) -> np.ndarray:
    row = np.full(vocab_size, -1e9)
    row[token] = 0.0
    return row


class OracleTranslator:
    """Decoder-only stand-in that emits the reference for every known source.

    Conditioning sequences are looked up in ``targets``; the reference tokens
    are produced one by one, then EOS.
    """

    architecture = Architecture.DECODER_ONLY

    def __init__(self, tokenizer, pairs: Sequence[SentencePair], max_seq_len: int = 512):
        self.tokenizer = tokenizer
        self.max_seq_len = max_seq_len
        self.targets = {}
        for pair in pairs:
            conditioning = tokenizer.encode(pair.src_text) + [tokenizer.tag_id(pair.tgt_lang)]
            self.targets[tuple(conditioning)] = tokenizer.encode(pair.tgt_text) + [EOS_ID]

    @property
    def vocab_size(self) -> int:
        return self.tokenizer.vocab_size

    def decoder_start(self) -> List[int]:
        return []

    def generation_room(self, conditioning: Sequence[int]) -> int:
        return self.max_seq_len - len(conditioning)

    def next_token_logprobs(self, conditioning: Sequence[int], prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        target = self.targets.get(tuple(conditioning), [EOS_ID])
        rows = []
        for prefix in prefixes:
            position = len(prefix)
            rows.append(one_hot_logprobs(self.vocab_size, target[position] if position < len(target) else EOS_ID))
        return np.stack(rows)


@pytest.fixture
def toy_texts():
    """Eight-way parallel en/hi/mr sentences of 20-40 characters."""
    return make_parallel(8, ("hi", "mr"), seed=3, min_chars=20, max_chars=40, lexicon_size=40)


@pytest.fixture
def toy_pairs(toy_texts):
    return {
        ("en", "hi"): make_pairs(toy_texts, "en", "hi"),
        ("en", "mr"): make_pairs(toy_texts, "en", "mr"),
        ("hi", "en"): make_pairs(toy_texts, "hi", "en"),
        ("mr", "en"): make_pairs(toy_texts, "mr", "en"),
    }


@pytest.fixture
def toy_tokenizer(toy_texts):
    corpus = [s for texts in toy_texts.values() for s in texts]
    return train_bpe(corpus, 200, [language_tag(l) for l in ("en", "hi", "mr")])


@pytest.fixture
def tiny_config():
    """Factory for small model configs."""

    def make(architecture: Architecture = Architecture.DECODER_ONLY, vocab_size: int = 20, **overrides) -> ModelConfig:
        settings = dict(d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=24, seed=0)
        settings.update(overrides)
        return ModelConfig(architecture=architecture, vocab_size=vocab_size, **settings)

    return make
