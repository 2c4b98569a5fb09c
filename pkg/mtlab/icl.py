"""Few-shot prompt construction and in-context-learning evaluation."""

import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .generation import extract_completion, generate
from .metrics import score_corpus
from .models import Architecture, GenerationConfig, MetricReport, SentencePair
from .tokenizer import SEP_TOKEN, SEP_ID, SubwordTokenizer

logger = logging.getLogger(__name__)

DEFAULT_PATTERN = "{src} #{tgt_lang}#> {tgt}"
PLACEHOLDERS = ("src", "tgt", "src_lang", "tgt_lang")
_PLACEHOLDER = re.compile(r"\{(src_lang|tgt_lang|src|tgt)\}")


class ExemplarStrategy(Enum):
    FIRST_K = "first_k"
    RANDOM = "random"


@dataclass(frozen=True)
class PromptTemplate:
    """How one (source, target) instance is rendered, and what joins instances.

    The query rendering is the pattern cut just before ``{tgt}``, so a model
    continuing the prompt writes exactly where a target would stand.
    """
    pattern: str = DEFAULT_PATTERN
    separator: str = SEP_TOKEN

    def __post_init__(self):
        fields = [name for _, name, _, _ in string.Formatter().parse(self.pattern) if name is not None]
        unknown = sorted(set(fields) - set(PLACEHOLDERS))
        if unknown:
            raise ValueError(f"Template has unknown placeholder(s) {unknown}; allowed: {list(PLACEHOLDERS)}")
        for name in ("src", "tgt"):
            if fields.count(name) != 1:
                raise ValueError(f"Template must contain {{{name}}} exactly once: {self.pattern!r}")
        if self.pattern.index("{src}") > self.pattern.index("{tgt}"):
            raise ValueError(f"Template must place {{src}} before {{tgt}}: {self.pattern!r}")

    @property
    def query_pattern(self) -> str:
        return self.pattern[:self.pattern.index("{tgt}")]

    def _fill(self, pattern: str, values: Dict[str, str]) -> str:
        def substitute(match: "re.Match") -> str:
            value = values.get(match.group(1))
            if value is None:
                raise ValueError(f"Template needs a value for {{{match.group(1)}}}")
            return value
        return _PLACEHOLDER.sub(substitute, pattern)

    def render(self, src: str, tgt: str, src_lang: Optional[str] = None, tgt_lang: Optional[str] = None) -> str:
        return self._fill(self.pattern, {"src": src, "tgt": tgt, "src_lang": src_lang, "tgt_lang": tgt_lang})

    def render_query(self, src: str, src_lang: Optional[str] = None, tgt_lang: Optional[str] = None) -> str:
        return self._fill(self.query_pattern, {"src": src, "src_lang": src_lang, "tgt_lang": tgt_lang})


@dataclass(frozen=True)
class Exemplar:
    x: str
    y: str

    def __post_init__(self):
        if not self.x.strip() or not self.y.strip():
            raise ValueError("Exemplar source and target must be non-empty")


@dataclass(frozen=True)
class FewShotPrompt:
    text: str
    n_shots: int
    query: str

    def token_length(self, tokenizer: SubwordTokenizer) -> int:
        return len(tokenizer.encode(self.text))


def build_prompt(exemplars: Sequence[Exemplar], query: str, template: PromptTemplate,
                 src_lang: Optional[str] = None, tgt_lang: Optional[str] = None) -> FewShotPrompt:
    """T(x1, y1) + sep + ... + T(xn, yn) + sep + query rendering, in exemplar order."""
    parts = [template.render(e.x, e.y, src_lang, tgt_lang) for e in exemplars]
    parts.append(template.render_query(query, src_lang, tgt_lang))
    return FewShotPrompt(text=template.separator.join(parts), n_shots=len(exemplars), query=query)


def select_exemplars(pool: Sequence[SentencePair], k: int,
                     strategy: Union[str, ExemplarStrategy] = ExemplarStrategy.FIRST_K,
                     seed: Union[int, Sequence[int]] = 0, query: Optional[str] = None) -> List[Exemplar]:
    """Pick ``k`` exemplars from ``pool``, never the pair whose source is ``query``."""
    strategy = ExemplarStrategy(strategy)
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    candidates = [p for p in pool if query is None or p.src_text != query]
    if k > len(candidates):
        raise ValueError(f"Cannot select {k} exemplars from a pool of {len(candidates)} (after removing the query)")
    if strategy is ExemplarStrategy.FIRST_K:
        chosen = candidates[:k]
    else:
        chosen = [candidates[i] for i in np.random.default_rng(seed).choice(len(candidates), size=k, replace=False)]
    return [Exemplar(p.src_text, p.tgt_text) for p in chosen]


def fit_prompt(exemplars: Sequence[Exemplar], query: str, template: PromptTemplate, tokenizer: SubwordTokenizer,
               budget: int, src_lang: Optional[str] = None,
               tgt_lang: Optional[str] = None) -> Tuple[Optional[FewShotPrompt], List[int]]:
    """Drop the oldest exemplars until the prompt fits in ``budget`` tokens.

    Returns ``(None, [])`` when even the zero-shot prompt is too long.
    """
    kept = list(exemplars)
    while True:
        prompt = build_prompt(kept, query, template, src_lang, tgt_lang)
        ids = tokenizer.encode(prompt.text)
        if len(ids) <= budget:
            return prompt, ids
        if not kept:
            return None, []
        kept.pop(0)


@dataclass
class IclRecord:
    """Audit line for one test sentence."""
    source: str
    prompt: str
    hypothesis: str
    reference: str
    n_shots_used: int

    def to_dict(self) -> Dict[str, object]:
        """Convert to dictionary for serialization."""
        return asdict(self)


@dataclass
class IclResult:
    report: MetricReport
    records: List[IclRecord] = field(default_factory=list)
    dropped_exemplars: int = 0
    overflowed: int = 0


def run_icl(
    model,
    pool: Sequence[SentencePair],
    test_pairs: Sequence[SentencePair],
    k: int,
    template: PromptTemplate,
    tokenizer: SubwordTokenizer,
    gc: GenerationConfig,
    strategy: Union[str, ExemplarStrategy] = ExemplarStrategy.FIRST_K,
    seed: int = 0,
    audit_path: Optional[Union[str, Path]] = None,
    bucket_edges: Sequence[int] = (),
    smoothing: str = "none",
    workers: int = 1,
) -> IclResult:
    """k-shot prompting of a decoder-only model over ``test_pairs``."""
    if model.architecture is not Architecture.DECODER_ONLY:
        raise ValueError("In-context evaluation needs a decoder-only model")
    if not test_pairs:
        raise ValueError("Cannot evaluate on an empty test set")
    directions = {p.direction for p in test_pairs}
    if len(directions) != 1:
        raise ValueError(f"Test pairs must share one direction, got {sorted(directions)}")
    src_lang, tgt_lang = directions.pop()
    budget = model.max_seq_len - gc.max_new_tokens
    icl_gc = gc.with_stops(SEP_ID)

    def one(index: int) -> Tuple[IclRecord, int, bool]:
        pair = test_pairs[index]
        exemplars = select_exemplars(pool, k, strategy, seed=[seed, index], query=pair.src_text)
        prompt, ids = fit_prompt(exemplars, pair.src_text, template, tokenizer, budget, src_lang, tgt_lang)
        if prompt is None:
            logger.warning(f"Test sentence {index} does not fit in {budget} tokens even zero-shot; empty hypothesis")
            return IclRecord(pair.src_text, "", "", pair.tgt_text, 0), len(exemplars), True
        generated = generate(model, ids, icl_gc)
        hypothesis = extract_completion(ids + generated, len(ids), tokenizer, icl_gc.stop_ids)
        return IclRecord(pair.src_text, prompt.text, hypothesis, pair.tgt_text, prompt.n_shots), \
            len(exemplars) - prompt.n_shots, False

    if workers <= 1:
        outcomes = [one(i) for i in range(len(test_pairs))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(one, range(len(test_pairs))))

    records = [record for record, _, _ in outcomes]
    dropped = sum(d for _, d, _ in outcomes)
    overflowed = sum(1 for _, _, o in outcomes if o)
    if dropped:
        logger.warning(f"Dropped {dropped} exemplars to fit prompts in {budget} tokens")

    if audit_path is not None:
        audit_path = Path(audit_path)
        audit_path.parent.mkdir(parents=True, exist_ok=True)
        with open(audit_path, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")

    report = score_corpus(
        [r.hypothesis for r in records],
        [r.reference for r in records],
        source_lengths=[len(tokenizer.encode(r.source)) for r in records],
        bucket_edges=bucket_edges,
        direction=f"{src_lang}-{tgt_lang}",
        provenance=f"icl k={k} strategy={ExemplarStrategy(strategy).value}; {icl_gc.provenance()}; "
                   f"tokenize=nfc+whitespace; bleu_smoothing={smoothing}",
        smoothing=smoothing,
    )
    logger.info(f"ICL {src_lang}-{tgt_lang} k={k}: BLEU {report.bleu:.2f} chrF {report.chrf:.2f} TER {report.ter:.4f}")
    return IclResult(report=report, records=records, dropped_exemplars=dropped, overflowed=overflowed)


def icl_evaluate(model, pool: Sequence[SentencePair], test_pairs: Sequence[SentencePair], k: int,
                 template: PromptTemplate, tokenizer: SubwordTokenizer, gc: GenerationConfig, **kwargs) -> MetricReport:
    return run_icl(model, pool, test_pairs, k, template, tokenizer, gc, **kwargs).report
