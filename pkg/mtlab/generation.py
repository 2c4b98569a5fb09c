"""Greedy and beam-search decoding for both architectures."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Protocol, Sequence, Tuple

import numpy as np

from .models import Architecture, GenerationConfig
from .tokenizer import EOS_ID, SubwordTokenizer

logger = logging.getLogger(__name__)


class Scorer(Protocol):
    """What decoding needs from a model; ``TranslationModel`` satisfies it."""

    @property
    def vocab_size(self) -> int: ...

    def decoder_start(self) -> List[int]: ...

    def generation_room(self, conditioning: Sequence[int]) -> int: ...

    def next_token_logprobs(self, conditioning: Sequence[int], prefixes: Sequence[Sequence[int]]) -> np.ndarray: ...


@dataclass(frozen=True)
class Hypothesis:
    """A decoded continuation; ``tokens`` never includes the stop token."""
    tokens: Tuple[int, ...]
    logprob: float
    finished: bool
    score: float

    @property
    def length(self) -> int:
        return len(self.tokens) + (1 if self.finished else 0)


def _length_normalized(logprob: float, length: int, alpha: float) -> float:
    return logprob / (max(length, 1) ** alpha)


def _budget(scorer: Scorer, conditioning: Sequence[int], gc: GenerationConfig) -> int:
    room = scorer.generation_room(conditioning)
    if room < 1:
        raise ValueError(f"No generation room: conditioning of {len(conditioning)} tokens leaves {room} slots")
    return min(gc.max_new_tokens, room)


def _masked(logprobs: np.ndarray, gc: GenerationConfig) -> np.ndarray:
    if gc.banned_ids:
        logprobs = logprobs.copy()
        logprobs[..., list(gc.banned_ids)] = -np.inf
    return logprobs


def greedy_decode(scorer: Scorer, conditioning: Sequence[int], gc: GenerationConfig) -> List[int]:
    """Append the argmax token (lowest id on ties) until a stop token or the budget."""
    budget = _budget(scorer, conditioning, gc)
    start = scorer.decoder_start()
    stops = set(gc.stop_ids)
    tokens: List[int] = []
    for _ in range(budget):
        logprobs = _masked(scorer.next_token_logprobs(conditioning, [start + tokens])[0], gc)
        token = int(np.argmax(logprobs))
        if token in stops:
            break
        tokens.append(token)
    return tokens


def beam_search_best(scorer: Scorer, conditioning: Sequence[int], gc: GenerationConfig) -> Hypothesis:
    """Length-penalized beam search returning the best hypothesis.

    At each step every live hypothesis is extended by every allowed token and
    the ``beam_width`` best candidates by cumulative log-probability are kept,
    ties going to the lexicographically smaller token sequence. Candidates
    ending in a stop token leave the beam for the finished pool. The answer is
    the finished hypothesis with the best ``logprob / len**alpha`` (len counts
    the stop token); when nothing finished, the best live one.
    """
    budget = _budget(scorer, conditioning, gc)
    start = scorer.decoder_start()
    stops = set(gc.stop_ids)
    width = gc.beam_width
    alive: List[Tuple[Tuple[int, ...], float]] = [((), 0.0)]
    finished: List[Hypothesis] = []

    for _ in range(budget):
        logprobs = _masked(scorer.next_token_logprobs(conditioning, [start + list(t) for t, _ in alive]), gc)
        candidates = []
        for (tokens, base), row in zip(alive, logprobs):
            # Per-row top-k suffices for the global top-k; stable sort keeps lowest ids first on ties.
            order = np.argsort(-row, kind="stable")[:width]
            for token in order:
                if np.isfinite(row[token]):
                    candidates.append((base + float(row[token]), tokens + (int(token),)))
        candidates.sort(key=lambda c: (-c[0], c[1]))

        alive = []
        for logprob, tokens in candidates[:width]:
            if tokens[-1] in stops:
                body = tokens[:-1]
                score = _length_normalized(logprob, len(tokens), gc.length_penalty)
                finished.append(Hypothesis(body, logprob, True, score))
            else:
                alive.append((tokens, logprob))
        if not alive:
            break

    if finished:
        pool = finished
    else:
        pool = [Hypothesis(t, lp, False, _length_normalized(lp, len(t), gc.length_penalty)) for t, lp in alive]
    if not pool:
        return Hypothesis((), 0.0, False, 0.0)
    return min(pool, key=lambda h: (-h.score, h.tokens))


def beam_search(scorer: Scorer, conditioning: Sequence[int], gc: GenerationConfig) -> List[int]:
    return list(beam_search_best(scorer, conditioning, gc).tokens)


def generate(scorer: Scorer, conditioning: Sequence[int], gc: GenerationConfig) -> List[int]:
    """Greedy for beam_width 1, beam search otherwise."""
    if gc.beam_width == 1:
        return greedy_decode(scorer, conditioning, gc)
    return beam_search(scorer, conditioning, gc)


def extract_completion(full_sequence: Sequence[int], prompt_len: int, tokenizer: SubwordTokenizer,
                       stop_ids: Sequence[int] = (EOS_ID,)) -> str:
    """Decode what follows the prompt, cut at the first stop token."""
    if not 0 <= prompt_len <= len(full_sequence):
        raise ValueError(f"prompt_len {prompt_len} outside [0, {len(full_sequence)}]")
    stops = set(stop_ids)
    completion = []
    for token in full_sequence[prompt_len:]:
        if token in stops:
            break
        completion.append(token)
    return tokenizer.decode(completion)


def conditioning_for(architecture: Architecture, tokenizer: SubwordTokenizer, src_text: str,
                     tgt_lang: str) -> List[int]:
    """Model input for translating ``src_text``, laid out as in training."""
    tag = tokenizer.tag_id(tgt_lang)
    src = tokenizer.encode(src_text)
    if architecture is Architecture.DECODER_ONLY:
        return src + [tag]
    return [tag] + src + [EOS_ID]


def translate(model, tokenizer: SubwordTokenizer, src_text: str, tgt_lang: str, gc: GenerationConfig) -> str:
    conditioning = conditioning_for(model.architecture, tokenizer, src_text, tgt_lang)
    return tokenizer.decode(generate(model, conditioning, gc))


def translate_batch(model, tokenizer: SubwordTokenizer, src_texts: Sequence[str], tgt_lang: str,
                    gc: GenerationConfig, workers: int = 1) -> List[str]:
    """Translate many sentences, optionally on a thread pool; output keeps input order.

    A sentence too long for the model yields an empty hypothesis.
    """
    tokenizer.tag_id(tgt_lang)

    def one(text: str) -> str:
        try:
            return translate(model, tokenizer, text, tgt_lang, gc)
        except ValueError as e:
            logger.warning(f"Empty hypothesis for a source of {len(text)} chars: {e}")
            return ""

    if workers <= 1:
        return [one(t) for t in src_texts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, src_texts))
