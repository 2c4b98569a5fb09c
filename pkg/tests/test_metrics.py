"""Tests for mtlab.metrics."""

import math

import numpy as np
import pytest

from conftest import OracleTranslator
from mtlab.metrics import (
    bleu,
    bleu_statistics,
    bucket_by_length,
    bucket_index,
    chrf,
    edit_distance,
    evaluate,
    metric_tokens,
    run_evaluation,
    score_corpus,
    ter,
    ter_edits,
)
from mtlab.models import GenerationConfig


def toks(*segments):
    return [s.split() for s in segments]


def reference_levenshtein(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return table[-1][-1]


class TestBleu:
    def test_perfect_match(self):
        segments = toks("the cat sat on the mat", "a b c d e")
        assert bleu(segments, segments) == pytest.approx(100.0)

    def test_no_unigram_overlap(self):
        assert bleu(toks("x y z w"), toks("a b c d")) == 0.0

    def test_brevity_penalty(self):
        assert bleu(toks("a b c d"), toks("a b c d e")) == pytest.approx(100 * math.exp(-0.25), abs=1e-3)
        assert bleu(toks("a b c d"), toks("a b c d e")) == pytest.approx(77.880, abs=1e-3)

    def test_statistics(self):
        stats = bleu_statistics(toks("a b c d"), toks("a b c d e"))
        assert stats.matches == (4, 3, 2, 1)
        assert stats.totals == (4, 3, 2, 1)
        assert (stats.hyp_len, stats.ref_len) == (4, 5)

    def test_longer_hypothesis_has_no_penalty(self):
        assert bleu_statistics(toks("a b c d e f"), toks("a b c d e")).brevity_penalty == 1.0

    def test_clipped_counts(self):
        stats = bleu_statistics(toks("the the the the"), toks("the cat"))
        assert stats.matches[0] == 1

    def test_add_one_smoothing(self):
        assert bleu(toks("a b"), toks("a c")) == 0.0
        assert bleu(toks("a b"), toks("a c"), smoothing="add-one") == pytest.approx(100 * math.sqrt(0.5))

    def test_unknown_smoothing(self):
        with pytest.raises(ValueError, match="smoothing"):
            bleu(toks("a"), toks("a"), smoothing="exp")

    def test_empty_hypothesis(self):
        assert bleu([[]], toks("a b")) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            bleu(toks("a", "b"), toks("a"))


class TestChrf:
    def test_identical(self):
        assert chrf(["नमस्ते दुनिया"], ["नमस्ते दुनिया"]) == pytest.approx(100.0)

    def test_disjoint(self):
        assert chrf(["abc"], ["xyz"]) == 0.0

    def test_hand_counts(self):
        assert chrf(["ab"], ["ac"]) == pytest.approx(25.0, abs=1e-3)

    def test_whitespace_ignored(self):
        assert chrf(["a b  c"], ["abc"]) == pytest.approx(100.0)

    def test_empty_reference_corpus(self):
        with pytest.raises(ValueError):
            chrf([], [])


class TestTer:
    def test_identical(self):
        assert ter(toks("a b c"), toks("a b c")) == 0.0

    def test_one_deletion(self):
        assert ter(toks("a b c d"), toks("a b c")) == pytest.approx(1 / 3, abs=1e-4)

    def test_one_shift(self):
        assert ter_edits("c a b".split(), "a b c".split()) == (1, 0)
        assert ter(toks("c a b"), toks("a b c")) == pytest.approx(1 / 3, abs=1e-4)

    def test_can_exceed_one(self):
        assert ter(toks("x y z w v"), toks("a")) == pytest.approx(5.0)

    def test_zero_only_for_identical(self):
        assert ter(toks("a b"), toks("a b c")) > 0.0

    def test_empty_reference_segment(self):
        with pytest.raises(ValueError):
            ter([["a"]], [[]])

    @pytest.mark.parametrize("seed", range(5))
    def test_edit_distance_matches_dynamic_program(self, seed):
        rng = np.random.default_rng(seed)
        a = list(rng.choice(list("abcd"), size=rng.integers(0, 9)))
        b = list(rng.choice(list("abcd"), size=rng.integers(0, 9)))
        assert edit_distance(a, b) == reference_levenshtein(a, b)


class TestCorpusProperties:
    @pytest.fixture
    def corpus(self):
        hyps = ["the cat sat", "a dog ran far away", "birds fly", "one two three four"]
        refs = ["the cat sat down", "a dog ran away", "birds can fly", "one two three four"]
        return hyps, refs

    def test_permutation_invariance(self, corpus):
        hyps, refs = corpus
        order = [2, 0, 3, 1]
        shuffled_h = [hyps[i] for i in order]
        shuffled_r = [refs[i] for i in order]
        first = score_corpus(hyps, refs)
        second = score_corpus(shuffled_h, shuffled_r)
        assert (first.bleu, first.chrf, first.ter) == pytest.approx((second.bleu, second.chrf, second.ter))

    def test_nfc_normalization(self):
        assert metric_tokens("cafe\u0301  au lait") == ["caf\u00e9", "au", "lait"]
        assert bleu([metric_tokens("cafe\u0301")], [metric_tokens("caf\u00e9")], smoothing="add-one") > 0


class TestBuckets:
    def test_edges(self):
        assert [bucket_index(n, [10, 20]) for n in (5, 10, 19, 20, 25)] == [0, 1, 1, 2, 2]

    def test_partition(self):
        items = list(np.random.default_rng(0).integers(0, 40, size=30))
        buckets = bucket_by_length(items, [10, 20], length_of=int)
        assert sorted(x for b in buckets for x in b) == sorted(items)
        assert all(int(x) < 10 for x in buckets[0])
        assert all(int(x) >= 20 for x in buckets[2])

    def test_no_edges_single_bucket(self):
        assert bucket_by_length(["a", "bb"], []) == [["a", "bb"]]

    def test_edges_must_increase(self):
        with pytest.raises(ValueError):
            bucket_by_length([], [20, 10])

    def test_report_buckets(self):
        hyps = ["a b", "c d e", "f"]
        report = score_corpus(hyps, hyps, source_lengths=[5, 15, 25], bucket_edges=[10, 20])
        assert [b.label for b in report.buckets] == ["0-9", "10-19", "20+"]
        assert [b.n_segments for b in report.buckets] == [1, 1, 1]
        assert all(b.chrf == pytest.approx(100.0) for b in report.buckets)

    def test_empty_bucket_has_no_scores(self):
        report = score_corpus(["a"], ["a"], source_lengths=[3], bucket_edges=[10])
        assert report.buckets[1].n_segments == 0
        assert report.buckets[1].bleu is None

    def test_source_length_mismatch(self):
        with pytest.raises(ValueError, match="source lengths"):
            score_corpus(["a"], ["a"], source_lengths=[1, 2])


class TestEvaluate:
    @pytest.mark.parametrize("beam_width", [1, 2])
    def test_oracle_hypotheses_score_perfectly(self, toy_pairs, toy_tokenizer, beam_width):
        pairs = toy_pairs[("en", "hi")]
        model = OracleTranslator(toy_tokenizer, pairs)
        report = evaluate(model, pairs, "hi", toy_tokenizer, GenerationConfig(beam_width=beam_width))
        assert report.bleu == pytest.approx(100.0)
        assert report.chrf == pytest.approx(100.0)
        assert report.ter == 0.0
        assert report.direction == "en-hi"
        assert report.n_segments == len(pairs)

    def test_keeps_hypotheses(self, toy_pairs, toy_tokenizer):
        pairs = toy_pairs[("hi", "en")][:3]
        result = run_evaluation(OracleTranslator(toy_tokenizer, pairs), pairs, "en", toy_tokenizer,
                                GenerationConfig(beam_width=1), bucket_edges=[8])
        assert result.hypotheses == [p.tgt_text for p in pairs]
        assert "greedy" in result.report.provenance
        assert len(result.report.buckets) == 2

    def test_empty_test_set(self, toy_tokenizer):
        with pytest.raises(ValueError, match="empty"):
            evaluate(None, [], "hi", toy_tokenizer, GenerationConfig())
