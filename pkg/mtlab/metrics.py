"""Corpus BLEU, chrF and TER, length buckets, and model evaluation."""

import logging
import math
import unicodedata
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .generation import translate_batch
from .models import BucketReport, GenerationConfig, MetricReport, SentencePair
from .tokenizer import SubwordTokenizer

logger = logging.getLogger(__name__)

T = TypeVar("T")

BLEU_MAX_ORDER = 4
TER_MAX_BLOCK = 10
TER_MAX_SHIFT_DISTANCE = 50
SMOOTHING_METHODS = ("none", "add-one")


def metric_tokens(text: str) -> List[str]:
    """Tokens used for BLEU and TER: NFC normalization, then whitespace split."""
    return unicodedata.normalize("NFC", text).split()


def _check_corpus(hyps: Sequence, refs: Sequence) -> None:
    if len(hyps) != len(refs):
        raise ValueError(f"Got {len(hyps)} hypotheses but {len(refs)} references")
    if not refs:
        raise ValueError("Cannot score an empty corpus")


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BleuStatistics:
    """Sufficient statistics behind a corpus BLEU score."""
    matches: Tuple[int, ...]
    totals: Tuple[int, ...]
    hyp_len: int
    ref_len: int
    precisions: Tuple[float, ...]
    brevity_penalty: float
    score: float


def bleu_statistics(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]],
                    smoothing: str = "none") -> BleuStatistics:
    _check_corpus(hyps, refs)
    if smoothing not in SMOOTHING_METHODS:
        raise ValueError(f"Unknown BLEU smoothing {smoothing!r}; expected one of {SMOOTHING_METHODS}")
    matches = [0] * BLEU_MAX_ORDER
    totals = [0] * BLEU_MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = []
    for n, (m, t) in enumerate(zip(matches, totals), start=1):
        if smoothing == "add-one" and n > 1:
            precisions.append((m + 1) / (t + 1))
        else:
            precisions.append(m / t if t else 0.0)

    brevity_penalty = math.exp(min(0.0, 1.0 - ref_len / hyp_len)) if hyp_len else 0.0
    if hyp_len == 0 or min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * brevity_penalty * math.exp(sum(math.log(p) for p in precisions) / BLEU_MAX_ORDER)
    return BleuStatistics(tuple(matches), tuple(totals), hyp_len, ref_len, tuple(precisions), brevity_penalty, score)


def bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]], smoothing: str = "none") -> float:
    """Corpus BLEU (0-100) over pre-tokenized segments, n-gram orders 1..4."""
    return bleu_statistics(hyps, refs, smoothing).score


# ---------------------------------------------------------------------------
# chrF
# ---------------------------------------------------------------------------

def chrf(hyps: Sequence[str], refs: Sequence[str], n_max: int = 6, beta: float = 2.0) -> float:
    """Corpus chrF (0-100): character n-gram F-beta over whitespace-free strings.

    Precision and recall are averaged over orders 1..n_max, skipping orders
    for which the reference corpus has no n-grams.
    """
    _check_corpus(hyps, refs)
    matches = [0] * n_max
    hyp_totals = [0] * n_max
    ref_totals = [0] * n_max
    for hyp, ref in zip(hyps, refs):
        h = "".join(hyp.split())
        r = "".join(ref.split())
        for n in range(1, n_max + 1):
            hyp_counts = _ngrams(h, n)
            ref_counts = _ngrams(r, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            hyp_totals[n - 1] += sum(hyp_counts.values())
            ref_totals[n - 1] += sum(ref_counts.values())

    precisions, recalls = [], []
    for m, ht, rt in zip(matches, hyp_totals, ref_totals):
        if rt == 0:
            continue
        precisions.append(m / ht if ht else 0.0)
        recalls.append(m / rt)
    if not precisions:
        return 0.0
    p = sum(precisions) / len(precisions)
    r = sum(recalls) / len(recalls)
    if p + r == 0:
        return 0.0
    b2 = beta * beta
    return 100.0 * (1 + b2) * p * r / (b2 * p + r)


# ---------------------------------------------------------------------------
# TER
# ---------------------------------------------------------------------------

def edit_distance(hyp: Sequence[str], ref: Sequence[str]) -> int:
    """Token-level Levenshtein distance, one numpy row per hypothesis token."""
    if not hyp:
        return len(ref)
    if not ref:
        return len(hyp)
    ref_arr = np.array(ref, dtype=object)
    positions = np.arange(len(ref) + 1)
    row = positions.copy()
    for i, token in enumerate(hyp, start=1):
        cost = (ref_arr != token).astype(np.int64)
        candidate = np.empty_like(row)
        candidate[0] = i
        candidate[1:] = np.minimum(row[1:] + 1, row[:-1] + cost)
        # Insertions chain left to right: cur[j] = min_k<=j (candidate[k] + j - k).
        row = np.minimum.accumulate(candidate - positions) + positions
    return int(row[-1])


def _contains(ref: Sequence[str], block: Sequence[str]) -> bool:
    n = len(block)
    return any(list(ref[i:i + n]) == list(block) for i in range(len(ref) - n + 1))


def ter_edits(hyp: Sequence[str], ref: Sequence[str]) -> Tuple[int, int]:
    """(shifts, edit distance) for one segment under greedy block shifting.

    Each round applies the shift with the largest strict reduction in edit
    distance; ties go to the shorter block, then the earlier block start,
    then the earlier destination. Blocks must occur in the reference, hold at
    most ``TER_MAX_BLOCK`` tokens and move at most ``TER_MAX_SHIFT_DISTANCE``.
    """
    if not ref:
        raise ValueError("TER needs a non-empty reference segment")
    words = list(hyp)
    current = edit_distance(words, ref)
    shifts = 0
    while current > 0:
        best: Optional[Tuple[int, List[str]]] = None
        for length in range(1, min(TER_MAX_BLOCK, len(words)) + 1):
            for start in range(len(words) - length + 1):
                block = words[start:start + length]
                if not _contains(ref, block):
                    continue
                rest = words[:start] + words[start + length:]
                for dest in range(len(rest) + 1):
                    if dest == start or abs(dest - start) > TER_MAX_SHIFT_DISTANCE:
                        continue
                    candidate = rest[:dest] + block + rest[dest:]
                    distance = edit_distance(candidate, ref)
                    if distance < current and (best is None or distance < best[0]):
                        best = (distance, candidate)
        if best is None:
            break
        current, words = best
        shifts += 1
    return shifts, current


def ter(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """Corpus TER: total (shifts + edits) over total reference tokens (a ratio, may exceed 1)."""
    _check_corpus(hyps, refs)
    total_edits = 0
    total_ref = 0
    for index, (hyp, ref) in enumerate(zip(hyps, refs)):
        if not ref:
            raise ValueError(f"TER reference segment {index} is empty")
        shifts, edits = ter_edits(hyp, ref)
        total_edits += shifts + edits
        total_ref += len(ref)
    return total_edits / total_ref


# ---------------------------------------------------------------------------
# Length buckets and reports
# ---------------------------------------------------------------------------

def _check_edges(edges: Sequence[int]) -> None:
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"Bucket edges must be strictly increasing, got {list(edges)}")


def bucket_index(length: int, edges: Sequence[int]) -> int:
    """Bucket 0 is [0, e0), bucket i is [e(i-1), e(i)), the last is open-ended."""
    return bisect_right(list(edges), length)


def bucket_by_length(items: Sequence[T], edges: Sequence[int], length_of: Callable[[T], int] = len) -> List[List[T]]:
    """Partition ``items`` into ``len(edges) + 1`` buckets by ``length_of(item)``."""
    _check_edges(edges)
    buckets: List[List[T]] = [[] for _ in range(len(edges) + 1)]
    for item in items:
        buckets[bucket_index(length_of(item), edges)].append(item)
    return buckets


def score_corpus(
    hyps: Sequence[str],
    refs: Sequence[str],
    source_lengths: Optional[Sequence[int]] = None,
    bucket_edges: Sequence[int] = (),
    direction: str = "",
    provenance: str = "",
    smoothing: str = "none",
) -> MetricReport:
    """Score detokenized segments overall and per length bucket.

    Buckets use ``source_lengths`` when given, otherwise the reference length
    in metric tokens.
    """
    _check_corpus(hyps, refs)
    _check_edges(bucket_edges)
    hyp_tokens = [metric_tokens(h) for h in hyps]
    ref_tokens = [metric_tokens(r) for r in refs]
    lengths = list(source_lengths) if source_lengths is not None else [len(r) for r in ref_tokens]
    if len(lengths) != len(refs):
        raise ValueError(f"Got {len(lengths)} source lengths for {len(refs)} segments")

    buckets = []
    edges = list(bucket_edges)
    if edges:
        groups = bucket_by_length(range(len(refs)), edges, lambda i: lengths[i])
        bounds = [0] + edges
        for index, members in enumerate(groups):
            upper = edges[index] if index < len(edges) else None
            report = BucketReport(index=index, lower=bounds[index], upper=upper, n_segments=len(members))
            if members:
                report.bleu = bleu([hyp_tokens[i] for i in members], [ref_tokens[i] for i in members], smoothing)
                report.chrf = chrf([hyps[i] for i in members], [refs[i] for i in members])
                report.ter = ter([hyp_tokens[i] for i in members], [ref_tokens[i] for i in members])
            buckets.append(report)

    return MetricReport(
        direction=direction,
        bleu=bleu(hyp_tokens, ref_tokens, smoothing),
        chrf=chrf(hyps, refs),
        ter=ter(hyp_tokens, ref_tokens),
        n_segments=len(refs),
        n_ref_tokens=sum(len(r) for r in ref_tokens),
        buckets=buckets,
        provenance=provenance,
    )


@dataclass
class EvaluationResult:
    report: MetricReport
    sources: List[str]
    hypotheses: List[str]
    references: List[str]


def run_evaluation(
    model,
    pairs: Sequence[SentencePair],
    tgt_lang: str,
    tokenizer: SubwordTokenizer,
    gc: GenerationConfig,
    bucket_edges: Sequence[int] = (),
    smoothing: str = "none",
    workers: int = 1,
) -> EvaluationResult:
    """Translate every source into ``tgt_lang`` and score against the references."""
    if not pairs:
        raise ValueError("Cannot evaluate on an empty test set")
    tokenizer.tag_id(tgt_lang)
    sources = [p.src_text for p in pairs]
    references = [p.tgt_text for p in pairs]
    hypotheses = translate_batch(model, tokenizer, sources, tgt_lang, gc, workers=workers)
    src_langs = sorted({p.src_lang for p in pairs})
    direction = f"{'+'.join(src_langs)}-{tgt_lang}"
    report = score_corpus(
        hypotheses,
        references,
        source_lengths=[len(tokenizer.encode(s)) for s in sources],
        bucket_edges=bucket_edges,
        direction=direction,
        provenance=f"{gc.provenance()}; tokenize=nfc+whitespace; bleu_smoothing={smoothing}",
        smoothing=smoothing,
    )
    logger.info(f"{direction}: BLEU {report.bleu:.2f} chrF {report.chrf:.2f} TER {report.ter:.4f} "
                f"({len(pairs)} segments)")
    return EvaluationResult(report, sources, hypotheses, references)


def evaluate(model, pairs: Sequence[SentencePair], tgt_lang: str, tokenizer: SubwordTokenizer,
             gc: GenerationConfig, **kwargs) -> MetricReport:
    return run_evaluation(model, pairs, tgt_lang, tokenizer, gc, **kwargs).report
