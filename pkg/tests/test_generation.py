"""Tests for mtlab.generation."""

import itertools
import math

import numpy as np
import pytest

from conftest import ScriptedScorer, one_hot_logprobs
from mtlab.generation import (
    beam_search,
    beam_search_best,
    conditioning_for,
    extract_completion,
    generate,
    greedy_decode,
    translate,
    translate_batch,
)
from mtlab.models import Architecture, GenerationConfig
from mtlab.tokenizer import EOS_ID, SEP_ID, language_tag, train_bpe
from mtlab.transformer import build_model


@pytest.fixture
def ab_tokenizer():
    return train_bpe(["ab"], 7)


def cycle_scorer(tokenizer):
    a, b = tokenizer.token_to_id("a"), tokenizer.token_to_id("b")
    vocab = tokenizer.vocab_size
    table = {
        (): one_hot_logprobs(vocab, a),
        (a,): one_hot_logprobs(vocab, b),
        (a, b): one_hot_logprobs(vocab, EOS_ID),
    }
    return ScriptedScorer(vocab, table, default=one_hot_logprobs(vocab, EOS_ID))


class TestScriptedDecoding:
    @pytest.mark.parametrize("beam_width", [1, 4])
    def test_immediate_stop(self, beam_width):
        scorer = ScriptedScorer(8, default=one_hot_logprobs(8, EOS_ID))
        assert generate(scorer, [5], GenerationConfig(beam_width=beam_width)) == []

    @pytest.mark.parametrize("beam_width", [1, 3])
    def test_cycle_decodes_to_text(self, ab_tokenizer, beam_width):
        tokens = generate(cycle_scorer(ab_tokenizer), [5], GenerationConfig(beam_width=beam_width))
        assert ab_tokenizer.decode(tokens) == "ab"

    def test_budget_caps_length(self):
        row = np.full(8, -np.inf)
        row[5] = 0.0
        scorer = ScriptedScorer(8, default=row)
        assert greedy_decode(scorer, [5], GenerationConfig(max_new_tokens=4)) == [5, 5, 5, 5]
        hyp = beam_search_best(scorer, [5], GenerationConfig(max_new_tokens=4, beam_width=2))
        assert hyp.tokens == (5, 5, 5, 5) and not hyp.finished

    def test_room_caps_length(self):
        scorer = ScriptedScorer(8, default=one_hot_logprobs(8, 5), room=2)
        assert greedy_decode(scorer, [5], GenerationConfig(max_new_tokens=10)) == [5, 5]

    def test_no_room_is_an_error(self):
        scorer = ScriptedScorer(8, default=one_hot_logprobs(8, 5), room=0)
        with pytest.raises(ValueError, match="room"):
            greedy_decode(scorer, [5], GenerationConfig())

    def test_banned_tokens_never_emitted(self):
        row = np.log(np.array([0.5, 0.3, 0.05, 0.05, 0.1]))
        scorer = ScriptedScorer(5, default=row)
        tokens = greedy_decode(scorer, [], GenerationConfig(max_new_tokens=3))
        assert tokens == [4, 4, 4]

    def test_greedy_ties_go_to_lowest_id(self):
        row = np.log(np.array([0.0, 0.0, 0.0, 0.5, 0.5]) + 1e-300)
        scorer = ScriptedScorer(5, {(): row}, default=one_hot_logprobs(5, EOS_ID))
        assert greedy_decode(scorer, [], GenerationConfig()) == [3]

    def test_extra_stop_token(self):
        vocab = 8
        table = {(): one_hot_logprobs(vocab, 6), (6,): one_hot_logprobs(vocab, SEP_ID)}
        scorer = ScriptedScorer(vocab, table, default=one_hot_logprobs(vocab, 7))
        assert greedy_decode(scorer, [], GenerationConfig(max_new_tokens=5).with_stops(SEP_ID)) == [6]
        assert greedy_decode(scorer, [], GenerationConfig(max_new_tokens=5)) == [6, SEP_ID, 7, 7, 7]


class TestBeamSearch:
    @pytest.mark.parametrize("seed", range(100))
    def test_width_one_equals_greedy(self, seed):
        scorer = ScriptedScorer(6, seed=seed)
        gc = GenerationConfig(max_new_tokens=6, beam_width=1, banned_ids=(0,))
        assert beam_search(scorer, [1], gc) == greedy_decode(scorer, [1], gc)

    @pytest.mark.parametrize("seed", range(50))
    def test_exhaustive_width_finds_optimum(self, seed):
        vocab, stop, steps = 4, 2, 3
        scorer = ScriptedScorer(vocab, seed=seed)
        gc = GenerationConfig(max_new_tokens=steps, beam_width=vocab ** steps, length_penalty=0.0,
                              stop_ids=(stop,), banned_ids=())
        body_tokens = [t for t in range(vocab) if t != stop]
        best, best_logprob = None, -math.inf
        for length in range(steps):
            for body in itertools.product(body_tokens, repeat=length):
                sequence = list(body) + [stop]
                logprob = sum(scorer.row(sequence[:i])[tok] for i, tok in enumerate(sequence))
                if logprob > best_logprob:
                    best, best_logprob = list(body), logprob
        hyp = beam_search_best(scorer, [], gc)
        assert list(hyp.tokens) == best
        assert hyp.logprob == pytest.approx(best_logprob)
        assert hyp.finished

    def test_length_penalty_changes_winner(self):
        vocab, stop = 4, 2
        table = {
            (): np.log(np.array([0.025, 0.025, 0.5, 0.45])),
            (3,): np.log(np.array([0.05, 0.025, 0.9, 0.025])),
        }
        scorer = ScriptedScorer(vocab, table, default=np.log(np.full(vocab, 0.25)))

        def best(alpha):
            gc = GenerationConfig(max_new_tokens=2, beam_width=2, length_penalty=alpha, stop_ids=(stop,),
                                  banned_ids=())
            return beam_search(scorer, [], gc)

        assert best(0.0) == []
        assert best(1.0) == [3]

    def test_score_counts_stop_token(self, ab_tokenizer):
        hyp = beam_search_best(cycle_scorer(ab_tokenizer), [5], GenerationConfig(beam_width=2))
        assert hyp.finished
        assert hyp.length == 3
        assert hyp.score == pytest.approx(0.0)

    @pytest.mark.parametrize("architecture", list(Architecture))
    def test_width_one_equals_greedy_on_model(self, tiny_config, architecture):
        model = build_model(tiny_config(architecture, seed=7))
        gc = GenerationConfig(max_new_tokens=5, beam_width=1)
        conditioning = [5, 9, 12]
        assert beam_search(model, conditioning, gc) == greedy_decode(model, conditioning, gc)


class TestExtractCompletion:
    @pytest.fixture
    def tokenizer(self):
        return train_bpe(["नमस्ते दुनिया", "hello world"], 60, [language_tag("hi")])

    def test_cut_at_first_stop(self, tokenizer):
        prompt = tokenizer.encode("hello") + [tokenizer.tag_id("hi")]
        full = prompt + tokenizer.encode("नमस्ते") + [EOS_ID] + tokenizer.encode("world")
        assert extract_completion(full, len(prompt), tokenizer) == "नमस्ते"

    def test_no_stop_takes_everything(self, tokenizer):
        full = tokenizer.encode("hello world")
        assert extract_completion(full, 0, tokenizer) == "hello world"

    def test_prompt_is_whole_sequence(self, tokenizer):
        full = tokenizer.encode("hello")
        assert extract_completion(full, len(full), tokenizer) == ""

    def test_separator_as_stop(self, tokenizer):
        full = tokenizer.encode("hello") + tokenizer.encode("दुनिया\nworld")
        prompt_len = len(tokenizer.encode("hello"))
        assert extract_completion(full, prompt_len, tokenizer, stop_ids=(EOS_ID, SEP_ID)) == "दुनिया"

    def test_prompt_len_out_of_range(self, tokenizer):
        with pytest.raises(ValueError):
            extract_completion([5, 6], 3, tokenizer)


class TestTranslate:
    def test_conditioning_layouts(self, toy_tokenizer):
        src = toy_tokenizer.encode("hello")
        tag = toy_tokenizer.tag_id("hi")
        assert conditioning_for(Architecture.DECODER_ONLY, toy_tokenizer, "hello", "hi") == src + [tag]
        assert conditioning_for(Architecture.ENCODER_DECODER, toy_tokenizer, "hello", "hi") == [tag] + src + [EOS_ID]

    @pytest.mark.parametrize("architecture", list(Architecture))
    def test_batch_keeps_order_and_skips_overlong(self, toy_texts, toy_tokenizer, tiny_config, architecture):
        model = build_model(tiny_config(architecture, vocab_size=toy_tokenizer.vocab_size, max_seq_len=16))
        gc = GenerationConfig(max_new_tokens=4, beam_width=2)
        texts = ["ab", " ".join(toy_texts["en"]), "ba"]
        serial = translate_batch(model, toy_tokenizer, texts, "hi", gc)
        threaded = translate_batch(model, toy_tokenizer, texts, "hi", gc, workers=3)
        assert serial == threaded
        assert serial[1] == ""
        assert serial[0] == translate(model, toy_tokenizer, "ab", "hi", gc)
