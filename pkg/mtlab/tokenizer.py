"""Shared byte-pair-encoding tokenizer with atomic language tags."""

import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .errors import TokenizerError

logger = logging.getLogger(__name__)

# Control tokens occupy ids 0..4 in this order.
PAD_TOKEN = "<pad>"
BOS_TOKEN = "<s>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
SEP_TOKEN = "\n"
CONTROL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, SEP_TOKEN)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, SEP_ID = range(len(CONTROL_TOKENS))

# Never matched inside raw text; only produced by the pipeline itself.
_CONTROL_ONLY = frozenset((PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN))
_DROPPED_ON_DECODE = frozenset((PAD_ID, BOS_ID, EOS_ID))

SPACE_MARKER = "\u2581"
FILE_HEADER = "BPE v1"

_LANG_CODE = re.compile(r"^[A-Za-z]{2,3}(?:[-_][A-Za-z0-9]+)?$")
_TAG_FORM = re.compile(r"^#([^#]+)#>$")
_CHUNK = re.compile(f"{SPACE_MARKER}*[^{SPACE_MARKER}]+|{SPACE_MARKER}+")


def language_tag(lang: str) -> str:
    """Surface form of the tag selecting output language ``lang``, e.g. ``#hi#>``."""
    if not _LANG_CODE.match(lang):
        raise TokenizerError(f"Invalid language code {lang!r}")
    return f"#{lang}#>"


def tag_language(tag: str) -> Optional[str]:
    """Inverse of ``language_tag``; None when ``tag`` is not a language tag."""
    match = _TAG_FORM.match(tag)
    return match.group(1) if match else None


def _escape(field: str) -> str:
    return field.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def _unescape(field: str) -> str:
    out = []
    chars = iter(field)
    for ch in chars:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(chars, "")
        out.append({"n": "\n", "t": "\t", "\\": "\\"}.get(nxt, nxt))
    return "".join(out)


def _chunks(text: str) -> List[str]:
    """Mark spaces and split into word chunks; merges never cross chunk boundaries."""
    return _CHUNK.findall(text.replace(" ", SPACE_MARKER))


def _merge_pair(symbols: Tuple[str, ...], pair: Tuple[str, str]) -> Tuple[str, ...]:
    left, right = pair
    merged: List[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            merged.append(left + right)
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return tuple(merged)


class SubwordTokenizer:
    """Immutable BPE vocabulary: specials, base alphabet, then merge products.

    ``encode``/``decode`` are pure, so one instance can serve many threads.
    """

    def __init__(self, specials: Sequence[str], alphabet: Sequence[str], merges: Sequence[Tuple[str, str]]):
        specials = list(specials)
        if tuple(specials[:len(CONTROL_TOKENS)]) != CONTROL_TOKENS:
            raise TokenizerError(f"Specials must start with the control tokens {CONTROL_TOKENS!r}")
        self.specials: Tuple[str, ...] = tuple(specials)
        self.alphabet: Tuple[str, ...] = tuple(alphabet)
        self.merges: Tuple[Tuple[str, str], ...] = tuple((l, r) for l, r in merges)

        self._id_to_token: List[str] = []
        self._token_to_id: Dict[str, int] = {}
        for token in self.specials + self.alphabet:
            self._add(token)
        for left, right in self.merges:
            self._add(left + right)
        self._ranks = {pair: rank for rank, pair in enumerate(self.merges)}

        matchable = sorted((s for s in self.specials if s not in _CONTROL_ONLY), key=len, reverse=True)
        self._special_pattern = (
            re.compile("(" + "|".join(re.escape(s) for s in matchable) + ")") if matchable else None
        )
        self._special_set = frozenset(self.specials)
        self._chunk_cache: Dict[str, Tuple[int, ...]] = {}

    def _add(self, token: str) -> None:
        if token in self._token_to_id:
            return
        self._token_to_id[token] = len(self._id_to_token)
        self._id_to_token.append(token)

    # -- lookups ---------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return len(self._id_to_token)

    @property
    def vocab(self) -> Dict[str, int]:
        return dict(self._token_to_id)

    def token_to_id(self, token: str) -> int:
        try:
            return self._token_to_id[token]
        except KeyError:
            raise TokenizerError(f"Token {token!r} is not in the vocabulary") from None

    def id_to_token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._id_to_token):
            raise TokenizerError(f"Token id {token_id} out of range [0, {self.vocab_size})")
        return self._id_to_token[token_id]

    @property
    def languages(self) -> List[str]:
        """Language codes whose tags are registered, in id order."""
        return [lang for lang in (tag_language(s) for s in self.specials) if lang]

    def has_language(self, lang: str) -> bool:
        return language_tag(lang) in self._special_set

    def tag_id(self, lang: str) -> int:
        """Id of the language tag for ``lang``; the error lists registered tags."""
        tag = language_tag(lang)
        if tag not in self._special_set:
            registered = ", ".join(language_tag(l) for l in self.languages) or "none"
            raise TokenizerError(f"Language tag {tag} is not registered (registered: {registered})")
        return self._token_to_id[tag]

    # -- encode / decode -------------------------------------------------

    def _encode_chunk(self, chunk: str) -> Tuple[int, ...]:
        cached = self._chunk_cache.get(chunk)
        if cached is not None:
            return cached
        symbols = tuple(chunk)
        last_rank = -1
        # Equivalent to applying every merge in order, skipping absent pairs.
        while len(symbols) > 1:
            best = None
            for pair in zip(symbols, symbols[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and rank > last_rank and (best is None or rank < best[0]):
                    best = (rank, pair)
            if best is None:
                break
            last_rank, pair = best
            symbols = _merge_pair(symbols, pair)
        ids = tuple(self._token_to_id.get(symbol, UNK_ID) for symbol in symbols)
        self._chunk_cache[chunk] = ids
        return ids

    def encode(self, text: str) -> List[int]:
        """Token ids for ``text``; specials are matched atomically, left to right, longest first."""
        segments = self._special_pattern.split(text) if self._special_pattern else [text]
        ids: List[int] = []
        for segment in segments:
            if not segment:
                continue
            if segment in self._special_set:
                ids.append(self._token_to_id[segment])
                continue
            for chunk in _chunks(segment):
                ids.extend(self._encode_chunk(chunk))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Text for ``ids``; PAD, BOS and EOS are dropped, other specials rendered verbatim."""
        pieces = []
        for token_id in ids:
            token_id = int(token_id)
            token = self.id_to_token(token_id)
            if token_id in _DROPPED_ON_DECODE:
                continue
            pieces.append(token if token in self._special_set else token.replace(SPACE_MARKER, " "))
        return "".join(pieces)

    # -- persistence -----------------------------------------------------

    def to_text(self) -> str:
        lines = [FILE_HEADER, "#specials"]
        lines.extend(_escape(s) for s in self.specials)
        lines.append("#alphabet")
        lines.extend(_escape(c) for c in self.alphabet)
        lines.append("#merges")
        lines.extend(f"{_escape(l)}\t{_escape(r)}" for l, r in self.merges)
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text(), encoding="utf-8")
        logger.info(f"Saved tokenizer ({self.vocab_size} tokens) to {path}")
        return path

    @classmethod
    def from_text(cls, text: str) -> "SubwordTokenizer":
        lines = text.split("\n")
        if not lines or lines[0] != FILE_HEADER:
            raise TokenizerError(f"Tokenizer file must start with {FILE_HEADER!r}")
        sections: Dict[str, List[str]] = {"#specials": [], "#alphabet": [], "#merges": []}
        current = None
        for line in lines[1:]:
            if line in sections:
                current = line
                continue
            if line == "":
                continue
            if current is None:
                raise TokenizerError(f"Unexpected line before any section: {line!r}")
            sections[current].append(line)
        merges = []
        for line in sections["#merges"]:
            parts = line.split("\t")
            if len(parts) != 2:
                raise TokenizerError(f"Malformed merge line {line!r}")
            merges.append((_unescape(parts[0]), _unescape(parts[1])))
        return cls(
            specials=[_unescape(s) for s in sections["#specials"]],
            alphabet=[_unescape(c) for c in sections["#alphabet"]],
            merges=merges,
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SubwordTokenizer":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def train_bpe(corpus: Sequence[str], vocab_size: int, specials: Sequence[str] = ()) -> SubwordTokenizer:
    """Learn merges greedily by pair frequency until ``vocab_size`` is reached.

    Ties between equally frequent pairs go to the lexicographically smallest
    pair; pairs occurring fewer than two times are never merged.
    """
    if not corpus:
        raise TokenizerError("Cannot train a tokenizer on an empty corpus")
    all_specials = list(CONTROL_TOKENS)
    for special in specials:
        if special not in all_specials:
            all_specials.append(special)

    matchable = sorted((s for s in all_specials if s not in _CONTROL_ONLY), key=len, reverse=True)
    pattern = re.compile("(" + "|".join(re.escape(s) for s in matchable) + ")")
    special_set = set(all_specials)

    word_counts: Counter = Counter()
    for line in corpus:
        for segment in pattern.split(line):
            if segment and segment not in special_set:
                word_counts.update(_chunks(segment))

    alphabet = sorted({ch for word in word_counts for ch in word})
    minimum = len(all_specials) + len(alphabet)
    if vocab_size < minimum:
        raise TokenizerError(
            f"vocab_size {vocab_size} is smaller than specials ({len(all_specials)}) + alphabet ({len(alphabet)})"
        )

    words = {tuple(word): count for word, count in word_counts.items()}
    known = set(all_specials) | set(alphabet)
    merges: List[Tuple[str, str]] = []
    while len(known) < vocab_size:
        pair_counts: Counter = Counter()
        for symbols, count in words.items():
            for pair in zip(symbols, symbols[1:]):
                pair_counts[pair] += count
        candidates = [
            (-count, pair) for pair, count in pair_counts.items()
            if count >= 2 and pair[0] + pair[1] not in special_set
        ]
        if not candidates:
            break
        _, best = min(candidates)
        merges.append(best)
        known.add(best[0] + best[1])
        merged_words: Dict[Tuple[str, ...], int] = {}
        for symbols, count in words.items():
            key = _merge_pair(symbols, best) if best[0] in symbols else symbols
            merged_words[key] = merged_words.get(key, 0) + count
        words = merged_words

    tokenizer = SubwordTokenizer(all_specials, alphabet, merges)
    logger.info(
        f"Trained BPE tokenizer: {tokenizer.vocab_size} tokens "
        f"({len(all_specials)} specials, {len(alphabet)} characters, {len(merges)} merges)"
    )
    return tokenizer
