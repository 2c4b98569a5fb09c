"""Synthetic parallel corpora for smoke runs and tests.

The source language is English-like text built from seeded pseudo-words.
Every target "language" is a fixed letter-for-letter cipher of it into its
own script, so the alphabets of different targets never overlap and a model
that routes on the language tag is easy to tell from one that does not.
"""

import logging
import string
from itertools import permutations
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .models import SentencePair
from .tokenizer import language_tag

logger = logging.getLogger(__name__)

SOURCE_LANG = "en"

# First code point of 26 consecutive assigned letters per cipher script.
CIPHER_SCRIPTS: Dict[str, int] = {
    "hi": 0x0915,  # Devanagari
    "mr": 0x0430,  # Cyrillic
    "bn": 0x05D0,  # Hebrew
    "ta": 0x10D0,  # Georgian
}

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


def cipher_table(lang: str) -> Dict[str, str]:
    try:
        base = CIPHER_SCRIPTS[lang]
    except KeyError:
        raise ValueError(f"No cipher for language {lang!r}; available: {', '.join(sorted(CIPHER_SCRIPTS))}") from None
    return {letter: chr(base + i) for i, letter in enumerate(string.ascii_lowercase)}


def cipher(text: str, lang: str) -> str:
    """Letter-for-letter transliteration of ``text`` into ``lang``'s script."""
    table = cipher_table(lang)
    return "".join(table.get(ch, ch) for ch in text)


def pseudo_words(n: int, seed: int = 0) -> List[str]:
    """``n`` distinct consonant-vowel words of 2 to 4 syllables."""
    rng = np.random.default_rng(seed)
    words: List[str] = []
    seen = set()
    while len(words) < n:
        syllables = rng.integers(2, 5)
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        )
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def english_sentences(n: int, seed: int = 0, min_chars: int = 45, max_chars: int = 90,
                      lexicon_size: int = 120) -> List[str]:
    """``n`` distinct sentences whose lengths start at ``min_chars`` and stay near ``max_chars``."""
    if not 0 < min_chars <= max_chars:
        raise ValueError(f"Need 0 < min_chars <= max_chars, got {min_chars} and {max_chars}")
    lexicon = pseudo_words(lexicon_size, seed)
    rng = np.random.default_rng([seed, 1])
    sentences: List[str] = []
    seen = set()
    attempts = 0
    while len(sentences) < n:
        attempts += 1
        if attempts > 100 * n + 1000:
            raise ValueError(f"Could not draw {n} distinct sentences from a lexicon of {lexicon_size} words")
        target = int(rng.integers(min_chars, max_chars + 1))
        words: List[str] = []
        while len(" ".join(words)) < target:
            words.append(lexicon[rng.integers(len(lexicon))])
        sentence = " ".join(words)
        if sentence not in seen:
            seen.add(sentence)
            sentences.append(sentence)
    return sentences


def make_parallel(n: int, target_langs: Sequence[str], seed: int = 0, **sentence_kwargs) -> Dict[str, List[str]]:
    """Multi-way parallel text: the same ``n`` source sentences in every language."""
    source = english_sentences(n, seed, **sentence_kwargs)
    texts = {SOURCE_LANG: source}
    for lang in target_langs:
        texts[lang] = [cipher(s, lang) for s in source]
    return texts


def make_pairs(texts: Dict[str, List[str]], src_lang: str, tgt_lang: str) -> List[SentencePair]:
    return [SentencePair(src_lang, tgt_lang, s, t) for s, t in zip(texts[src_lang], texts[tgt_lang])]


def write_toy_corpora(
    out_dir: Union[str, Path],
    n_pairs: int,
    target_langs: Sequence[str] = ("hi", "mr"),
    seed: int = 0,
    all_pairs: bool = False,
    **sentence_kwargs,
) -> Dict[Tuple[str, str], Path]:
    """Write ``src-tgt.tsv`` files: en to every target, or every ordered language pair."""
    for lang in target_langs:
        language_tag(lang)
    texts = make_parallel(n_pairs, target_langs, seed, **sentence_kwargs)
    langs = [SOURCE_LANG] + list(target_langs)
    if all_pairs:
        directions = list(permutations(langs, 2))
    else:
        directions = [(SOURCE_LANG, t) for t in target_langs]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: Dict[Tuple[str, str], Path] = {}
    for src, tgt in directions:
        path = out_dir / f"{src}-{tgt}.tsv"
        path.write_text("".join(f"{s}\t{t}\n" for s, t in zip(texts[src], texts[tgt])), encoding="utf-8")
        written[(src, tgt)] = path
    logger.info(f"Wrote {len(written)} toy corpora of {n_pairs} pairs to {out_dir}")
    return written
