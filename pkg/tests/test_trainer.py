"""Tests for mtlab.trainer."""

import math

import numpy as np
import pytest

from mtlab.checkpoint import load_checkpoint
from mtlab.data import encode_example
from mtlab.errors import TrainingDivergedError
from mtlab.generation import translate
from mtlab.metrics import bleu, metric_tokens
from mtlab.models import Architecture, GenerationConfig, ModelConfig, SentencePair, TrainConfig
from mtlab.presets import TINY_MODEL
from mtlab.tokenizer import language_tag, train_bpe
from mtlab.toydata import make_pairs, make_parallel
from mtlab.trainer import (
    FINAL_CHECKPOINT,
    AdamState,
    adam_step,
    clip_grad_norm,
    evaluate_loss,
    global_norm,
    learning_rate_at,
    train,
)
from mtlab.transformer import build_model


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = {"w": np.array([1.0])}
        state = AdamState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)})
        tc = TrainConfig(learning_rate=0.1, warmup_steps=0)
        adam_step(params, {"w": np.array([1.0])}, state, tc, step=1)
        assert params["w"][0] == pytest.approx(0.9, abs=1e-6)

    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamState(m={"w": np.zeros(2)}, v={"w": np.zeros(2)})
        adam_step(params, {"w": np.zeros(2)}, state, TrainConfig(warmup_steps=0), step=1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_step_must_be_positive(self):
        state = AdamState(m={"w": np.zeros(1)}, v={"w": np.zeros(1)})
        with pytest.raises(ValueError):
            adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, state, TrainConfig(), step=0)

    def test_shape_mismatch(self):
        state = AdamState(m={"w": np.zeros(2)}, v={"w": np.zeros(2)})
        with pytest.raises(ValueError, match="shape"):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, state, TrainConfig(), step=1)

    def test_state_blocks_round_trip(self, tiny_config):
        model = build_model(tiny_config())
        state = AdamState.zeros(model)
        restored = AdamState.from_blocks(state.to_blocks(), list(model.params))
        assert set(restored.m) == set(model.params)
        np.testing.assert_array_equal(restored.v["tok_emb"], np.zeros_like(model.params["tok_emb"].data))
        with pytest.raises(ValueError, match="optimizer state"):
            AdamState.from_blocks({}, ["tok_emb"])


class TestSchedule:
    def test_warmup_is_linear(self):
        tc = TrainConfig(learning_rate=1e-3, warmup_steps=10)
        assert learning_rate_at(tc, 1) == pytest.approx(1e-4)
        assert learning_rate_at(tc, 5) == pytest.approx(5e-4)
        assert learning_rate_at(tc, 10) == 1e-3
        assert learning_rate_at(tc, 500) == 1e-3

    def test_no_warmup(self):
        assert learning_rate_at(TrainConfig(learning_rate=0.5, warmup_steps=0), 1) == 0.5


class TestClipping:
    def test_rescales_to_max_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        assert global_norm(grads) == pytest.approx(1.0)
        np.testing.assert_allclose(grads["a"], [0.6])

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        clip_grad_norm(grads, 1.0)
        np.testing.assert_array_equal(grads["a"], [0.3, 0.4])


def make_examples(tokenizer, architecture, n=4):
    pairs = [
        SentencePair("en", "hi", "ab ba", "ba ab"),
        SentencePair("en", "hi", "aab", "bba"),
        SentencePair("en", "hi", "ba", "ab"),
        SentencePair("en", "hi", "bab", "aba"),
    ]
    return [encode_example(p, tokenizer, architecture) for p in pairs[:n]]


@pytest.fixture
def ab_tokenizer():
    return train_bpe(["ab ba aab bba bab aba"], 14, [language_tag("en"), language_tag("hi")])


def fast_config(**overrides):
    settings = dict(learning_rate=1e-2, warmup_steps=2, batch_size=2, max_steps=6, log_every=2, seed=3)
    settings.update(overrides)
    return TrainConfig(**settings)


class TestTrain:
    @pytest.mark.parametrize("architecture", list(Architecture))
    def test_loss_log_and_final_checkpoint(self, ab_tokenizer, tiny_config, architecture, tmp_path):
        model = build_model(tiny_config(architecture, vocab_size=ab_tokenizer.vocab_size))
        result = train(model, make_examples(ab_tokenizer, architecture), fast_config(), checkpoint_dir=tmp_path)
        assert [r.step for r in result.loss_log.records] == [2, 4, 6]
        assert all(math.isfinite(r.train_loss) for r in result.loss_log.records)
        assert result.checkpoints == [tmp_path / FINAL_CHECKPOINT]
        assert load_checkpoint(result.checkpoints[0]).train_state.step == 6

    def test_single_step_single_checkpoint(self, ab_tokenizer, tiny_config, tmp_path):
        model = build_model(tiny_config(vocab_size=ab_tokenizer.vocab_size))
        result = train(model, make_examples(ab_tokenizer, Architecture.DECODER_ONLY),
                       fast_config(max_steps=1, checkpoint_every=1), checkpoint_dir=tmp_path)
        assert len(result.checkpoints) == 1
        assert result.state.step == 1

    def test_periodic_checkpoints(self, ab_tokenizer, tiny_config, tmp_path):
        model = build_model(tiny_config(vocab_size=ab_tokenizer.vocab_size))
        result = train(model, make_examples(ab_tokenizer, Architecture.DECODER_ONLY),
                       fast_config(checkpoint_every=4), checkpoint_dir=tmp_path)
        assert [p.name for p in result.checkpoints] == ["ckpt_step000004.ckpt", FINAL_CHECKPOINT]

    def test_validation_loss_recorded(self, ab_tokenizer, tiny_config):
        model = build_model(tiny_config(vocab_size=ab_tokenizer.vocab_size))
        examples = make_examples(ab_tokenizer, Architecture.DECODER_ONLY)
        result = train(model, examples[:3], fast_config(), eval_set=examples[3:])
        assert all(r.val_loss is not None for r in result.loss_log.records)
        assert result.loss_log.last.val_loss == pytest.approx(evaluate_loss(model, examples[3:], 2))

    def test_deterministic(self, ab_tokenizer, tiny_config):
        examples = make_examples(ab_tokenizer, Architecture.DECODER_ONLY)
        config = tiny_config(vocab_size=ab_tokenizer.vocab_size, dropout_rate=0.1)
        first = train(build_model(config), examples, fast_config())
        second = train(build_model(config), examples, fast_config())
        assert first.loss_log.to_csv(False) == second.loss_log.to_csv(False)
        for name, param in first.model.named_parameters():
            np.testing.assert_array_equal(param.data, second.model.params[name].data)

    @pytest.mark.parametrize("architecture", list(Architecture))
    def test_resume_matches_uninterrupted(self, ab_tokenizer, tiny_config, architecture, tmp_path):
        examples = make_examples(ab_tokenizer, architecture)
        config = tiny_config(architecture, vocab_size=ab_tokenizer.vocab_size, dropout_rate=0.1)
        straight = train(build_model(config), examples, fast_config(max_steps=10, log_every=1))

        partial = train(build_model(config), examples, fast_config(max_steps=5, log_every=1),
                        checkpoint_dir=tmp_path)
        resumed = train(build_model(config), examples, fast_config(max_steps=10, log_every=1),
                        resume=load_checkpoint(partial.checkpoints[-1]))
        for name, param in straight.model.named_parameters():
            np.testing.assert_array_equal(resumed.model.params[name].data, param.data)
        combined = partial.loss_log
        combined.extend(resumed.loss_log)
        assert combined.to_csv(False) == straight.loss_log.to_csv(False)

    def test_empty_dataset(self, tiny_config):
        with pytest.raises(ValueError, match="empty"):
            train(build_model(tiny_config()), [], fast_config())

    def test_invalid_config(self, ab_tokenizer, tiny_config):
        model = build_model(tiny_config(vocab_size=ab_tokenizer.vocab_size))
        with pytest.raises(ValueError, match="learning_rate"):
            train(model, make_examples(ab_tokenizer, Architecture.DECODER_ONLY), fast_config(learning_rate=0))

    def test_divergence_reported(self, ab_tokenizer, tiny_config):
        model = build_model(tiny_config(vocab_size=ab_tokenizer.vocab_size))
        model.params["tok_emb"].data[:] = np.nan
        with pytest.raises(TrainingDivergedError) as info:
            train(model, make_examples(ab_tokenizer, Architecture.DECODER_ONLY), fast_config())
        assert info.value.step == 1

    def test_on_step_callback(self, ab_tokenizer, tiny_config):
        seen = []
        model = build_model(tiny_config(vocab_size=ab_tokenizer.vocab_size))
        train(model, make_examples(ab_tokenizer, Architecture.DECODER_ONLY), fast_config(),
              on_step=lambda step, loss: seen.append(step))
        assert seen == [1, 2, 3, 4, 5, 6]


@pytest.fixture(scope="module")
def memorization_corpus():
    texts = make_parallel(32, ("hi",), seed=11, min_chars=12, max_chars=24, lexicon_size=24)
    pairs = make_pairs(texts, "en", "hi")
    tokenizer = train_bpe(texts["en"] + texts["hi"], 120, [language_tag("en"), language_tag("hi")])
    return pairs, tokenizer


@pytest.mark.slow
@pytest.mark.parametrize("architecture", list(Architecture))
def test_memorizes_tiny_corpus(memorization_corpus, architecture):
    pairs, tokenizer = memorization_corpus
    config = ModelConfig(architecture=architecture, vocab_size=tokenizer.vocab_size,
                         **dict(TINY_MODEL, d_model=64, n_layers=2, d_ff=128))
    model = build_model(config)
    examples = [encode_example(p, tokenizer, architecture) for p in pairs]
    tc = TrainConfig(learning_rate=3e-3, warmup_steps=50, batch_size=8, max_steps=2000, log_every=100,
                     grad_clip_norm=1.0)

    initial_loss = evaluate_loss(model, examples, 8)
    result = train(model, examples, tc)
    final_loss = evaluate_loss(result.model, examples, 8)
    assert final_loss < initial_loss
    assert final_loss < 0.1

    gc = GenerationConfig(max_new_tokens=48, beam_width=1)
    hyps = [translate(result.model, tokenizer, p.src_text, "hi", gc) for p in pairs]
    refs = [p.tgt_text for p in pairs]
    assert sum(h == r for h, r in zip(hyps, refs)) >= 31
    assert bleu([metric_tokens(h) for h in hyps], [metric_tokens(r) for r in refs]) >= 99.0
