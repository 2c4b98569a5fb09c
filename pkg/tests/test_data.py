"""Tests for mtlab.data."""

from collections import Counter

import numpy as np
import pytest

from mtlab.data import (
    batches_per_epoch,
    build_direction_dataset,
    collate,
    encode_example,
    filter_by_length,
    load_corpus,
    make_batches,
    split_pairs,
)
from mtlab.errors import CorpusFormatError, TokenizerError
from mtlab.models import Architecture, DirectionConfig, Mixing, Regime, SentencePair, TrainingExample
from mtlab.tensor import IGNORE_INDEX
from mtlab.tokenizer import BOS_ID, EOS_ID, PAD_ID
from mtlab.toydata import make_parallel
from mtlab.transformer import build_model


def pair(src: str, tgt: str, src_lang: str = "en", tgt_lang: str = "hi") -> SentencePair:
    return SentencePair(src_lang, tgt_lang, src, tgt)


class TestLoadCorpus:
    def test_single_line(self, tmp_path):
        path = tmp_path / "en-hi.tsv"
        path.write_text("hello\tnamaste\n", encoding="utf-8")
        assert load_corpus(path, "en", "hi") == [pair("hello", "namaste")]

    def test_order_and_unicode(self, tmp_path):
        path = tmp_path / "en-hi.tsv"
        path.write_text("one\tएक\ntwo\tदो\r\nthree\tतीन", encoding="utf-8")
        assert [p.tgt_text for p in load_corpus(path, "en", "hi")] == ["एक", "दो", "तीन"]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.tsv"
        path.write_text("", encoding="utf-8")
        assert load_corpus(path, "en", "hi") == []

    def test_missing_tab_names_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("no tab here\nok\tfine\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match="line 1") as info:
            load_corpus(path, "en", "hi")
        assert info.value.line_number == 1

    def test_two_tabs_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\tb\n\tc\td\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match="line 2"):
            load_corpus(path, "en", "hi")

    def test_empty_side_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("a\t \n", encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            load_corpus(path, "en", "hi")

    def test_skip_bad(self, tmp_path):
        path = tmp_path / "mixed.tsv"
        path.write_text("no tab\nkept\tpair\n", encoding="utf-8")
        assert load_corpus(path, "en", "hi", skip_bad=True) == [pair("kept", "pair")]

    def test_invalid_utf8(self, tmp_path):
        path = tmp_path / "latin.tsv"
        path.write_bytes(b"caf\xe9\tcoffee\n")
        with pytest.raises(CorpusFormatError, match="UTF-8"):
            load_corpus(path, "en", "hi")


class TestFilterByLength:
    def test_short_pair_dropped(self):
        assert filter_by_length([pair("a" * 10, "b" * 50)]) == []

    def test_both_sides_must_fit(self):
        assert filter_by_length([pair("a" * 39, "b" * 50)]) == []
        assert filter_by_length([pair("a" * 50, "b" * 201)]) == []

    def test_bounds_inclusive(self):
        pairs = [pair("a" * 40, "b" * 200)]
        assert filter_by_length(pairs) == pairs

    def test_unbounded_is_identity(self):
        pairs = [pair("a", "b"), pair("a" * 500, "b" * 3)]
        assert filter_by_length(pairs, 0, float("inf")) == pairs

    def test_inverted_bounds(self):
        with pytest.raises(ValueError):
            filter_by_length([], 10, 5)

    def test_raising_max_never_drops_a_kept_pair(self):
        texts = make_parallel(300, ("hi",), seed=4, min_chars=5, max_chars=120, lexicon_size=60)
        # shift targets by one so source and target lengths differ
        pairs = [pair(s, t) for s, t in zip(texts["en"], texts["hi"][1:] + texts["hi"][:1])]
        previous = set()
        for max_chars in range(10, 131, 10):
            kept = set(filter_by_length(pairs, 20, max_chars))
            assert previous <= kept
            previous = kept
        assert previous


class TestSplitPairs:
    @pytest.fixture
    def pairs(self):
        return [pair(f"source {i}", f"target {i}") for i in range(20)]

    def test_fractions(self, pairs):
        split = split_pairs(pairs, valid_size=0.1, test_size=0.2, seed=1)
        assert (len(split.train), len(split.valid), len(split.test)) == (14, 2, 4)
        assert sorted(split.train + split.valid + split.test, key=pairs.index) == pairs

    def test_counts_and_order(self, pairs):
        split = split_pairs(pairs, valid_size=0, test_size=5, seed=2)
        assert len(split.test) == 5
        assert [pairs.index(p) for p in split.train] == sorted(pairs.index(p) for p in split.train)

    def test_seeded(self, pairs):
        assert split_pairs(pairs, seed=4).test == split_pairs(pairs, seed=4).test

    def test_nothing_left_to_train(self, pairs):
        with pytest.raises(ValueError, match="no training data"):
            split_pairs(pairs, valid_size=10, test_size=10)


class TestEncodeExample:
    def test_decoder_only_layout(self, toy_tokenizer):
        example = encode_example(pair("one", "two"), toy_tokenizer, Architecture.DECODER_ONLY)
        src, tgt = toy_tokenizer.encode("one"), toy_tokenizer.encode("two")
        tag = toy_tokenizer.tag_id("hi")
        assert example.decoder_ids == tuple(src + [tag] + tgt + [EOS_ID])
        assert example.labels == (IGNORE_INDEX,) * len(src) + tuple(tgt) + (EOS_ID,)
        assert example.encoder_ids == ()

    def test_encoder_decoder_layout(self, toy_tokenizer):
        example = encode_example(pair("one", "two"), toy_tokenizer, Architecture.ENCODER_DECODER)
        src, tgt = toy_tokenizer.encode("one"), toy_tokenizer.encode("two")
        tag = toy_tokenizer.tag_id("hi")
        assert example.encoder_ids == tuple([tag] + src + [EOS_ID])
        assert example.decoder_input == tuple([BOS_ID] + tgt)
        assert example.labels == tuple(tgt + [EOS_ID])

    def test_unregistered_target_language(self, toy_tokenizer):
        with pytest.raises(TokenizerError):
            encode_example(pair("one", "two", "en", "ta"), toy_tokenizer, Architecture.DECODER_ONLY)


class TestBuildDirectionDataset:
    def test_one_to_one(self, toy_pairs, toy_tokenizer):
        dc = DirectionConfig(Regime.ONE_TO_ONE, ("en",), ("hi",))
        dataset = build_direction_dataset(toy_pairs, dc, toy_tokenizer, Architecture.DECODER_ONLY, 512)
        assert len(dataset) == 8
        assert set(dataset.tag_counts()) == {toy_tokenizer.tag_id("hi")}

    def test_one_to_many_tags(self, toy_pairs, toy_tokenizer):
        dc = DirectionConfig(Regime.ONE_TO_MANY, ("en",), ("hi", "mr"))
        dataset = build_direction_dataset(toy_pairs, dc, toy_tokenizer, Architecture.ENCODER_DECODER, 512)
        assert dataset.tag_counts() == Counter({toy_tokenizer.tag_id("hi"): 8, toy_tokenizer.tag_id("mr"): 8})
        assert dataset.per_direction == {"en-hi": 8, "en-mr": 8}

    def test_many_to_one(self, toy_pairs, toy_tokenizer):
        dc = DirectionConfig(Regime.MANY_TO_ONE, ("hi", "mr"), ("en",))
        dataset = build_direction_dataset(toy_pairs, dc, toy_tokenizer, Architecture.DECODER_ONLY, 512)
        assert len(dataset) == 16
        assert {(e.src_lang, e.tgt_lang) for e in dataset} == {("hi", "en"), ("mr", "en")}

    def test_missing_direction(self, toy_pairs, toy_tokenizer):
        dc = DirectionConfig(Regime.ONE_TO_ONE, ("hi",), ("mr",))
        with pytest.raises(ValueError, match="hi->mr"):
            build_direction_dataset(toy_pairs, dc, toy_tokenizer, Architecture.DECODER_ONLY, 512)

    def test_over_length_dropped_not_truncated(self, toy_pairs, toy_tokenizer):
        dc = DirectionConfig(Regime.ONE_TO_ONE, ("en",), ("hi",))
        lengths = [encode_example(p, toy_tokenizer, Architecture.DECODER_ONLY).length for p in toy_pairs[("en", "hi")]]
        limit = sorted(lengths)[len(lengths) // 2]
        dataset = build_direction_dataset(toy_pairs, dc, toy_tokenizer, Architecture.DECODER_ONLY, limit)
        assert dataset.dropped == sum(length > limit for length in lengths)
        assert all(e.length <= limit for e in dataset)

    def test_uniform_mixing_balances(self, toy_pairs, toy_tokenizer):
        corpora = dict(toy_pairs)
        corpora[("en", "mr")] = corpora[("en", "mr")][:3]
        dc = DirectionConfig(Regime.ONE_TO_MANY, ("en",), ("hi", "mr"), Mixing.UNIFORM)
        dataset = build_direction_dataset(corpora, dc, toy_tokenizer, Architecture.DECODER_ONLY, 512, seed=1)
        assert dataset.per_direction == {"en-hi": 8, "en-mr": 8}

    def test_seeded_order(self, toy_pairs, toy_tokenizer):
        dc = DirectionConfig(Regime.ONE_TO_MANY, ("en",), ("hi", "mr"))
        first = build_direction_dataset(toy_pairs, dc, toy_tokenizer, Architecture.DECODER_ONLY, 512, seed=5)
        second = build_direction_dataset(toy_pairs, dc, toy_tokenizer, Architecture.DECODER_ONLY, 512, seed=5)
        assert first.examples == second.examples


def example(ids, n_prompt=1, architecture=Architecture.DECODER_ONLY, encoder_ids=()):
    mask = (False,) * n_prompt + (True,) * (len(ids) - n_prompt)
    return TrainingExample(architecture, "en", "hi", 5, tuple(ids), mask, tuple(encoder_ids))


class TestBatches:
    def test_padding(self):
        batch = collate([example([6, 7, 8, 9]), example([6, 7, 8, 9, 10, 11])])
        assert batch.decoder_input.shape == (2, 5)
        assert list(batch.decoder_lengths) == [3, 5]
        assert list(batch.decoder_input[0, 3:]) == [PAD_ID, PAD_ID]
        assert list(batch.labels[0]) == [7, 8, 9, IGNORE_INDEX, IGNORE_INDEX]
        assert batch.decoder_mask.sum() == 8
        assert batch.n_target_tokens == 3 + 5

    def test_encoder_side_padded(self):
        arch = Architecture.ENCODER_DECODER
        batch = collate([
            example([BOS_ID, 7, EOS_ID], architecture=arch, encoder_ids=[5, 6, EOS_ID]),
            example([BOS_ID, EOS_ID], architecture=arch, encoder_ids=[5, 6, 7, 8, EOS_ID]),
        ])
        assert batch.encoder_input.shape == (2, 5)
        assert list(batch.encoder_lengths) == [3, 5]

    def test_mixed_architectures_rejected(self):
        with pytest.raises(ValueError):
            collate([example([6, 7]), example([1, 7, 2], architecture=Architecture.ENCODER_DECODER,
                                                 encoder_ids=[5, 2])])

    @pytest.mark.parametrize("architecture", list(Architecture))
    def test_padding_does_not_change_loss(self, tiny_config, architecture):
        model = build_model(tiny_config(architecture))
        if architecture is Architecture.DECODER_ONLY:
            batch = collate([example([6, 7, 8, 9]), example([10, 11, 12])])
        else:
            batch = collate([
                example([BOS_ID, 7, 8, EOS_ID], architecture=architecture, encoder_ids=[5, 6, EOS_ID]),
                example([BOS_ID, 9, EOS_ID], architecture=architecture, encoder_ids=[5, 6, 7, 8, EOS_ID]),
            ])
        assert model.loss(batch.pad_to(9)).item() == pytest.approx(model.loss(batch).item(), abs=1e-12)

    def test_pad_to_narrower_rejected(self):
        with pytest.raises(ValueError):
            collate([example([6, 7, 8])]).pad_to(1)

    def test_make_batches_seeded(self):
        examples = [example([6, 7 + i, 8]) for i in range(10)]
        first = make_batches(examples, 3, seed=1, epoch=2)
        second = make_batches(examples, 3, seed=1, epoch=2)
        assert len(first) == batches_per_epoch(10, 3) == 4
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.decoder_input, b.decoder_input)
        other = make_batches(examples, 3, seed=1, epoch=3)
        assert any(not np.array_equal(a.decoder_input, b.decoder_input) for a, b in zip(first, other))

    def test_unshuffled_keeps_order(self):
        examples = [example([6, 7 + i, 8]) for i in range(4)]
        batches = make_batches(examples, 2, shuffle=False)
        assert [int(row[1]) for b in batches for row in b.decoder_input] == [7, 8, 9, 10]

    def test_empty(self):
        assert make_batches([], 4) == []
