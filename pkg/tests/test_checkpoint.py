"""Tests for mtlab.checkpoint."""

import numpy as np
import pytest

from mtlab.checkpoint import Checkpoint, TrainState, load_checkpoint, save_checkpoint
from mtlab.errors import CheckpointError
from mtlab.models import Architecture
from mtlab.trainer import AdamState
from mtlab.transformer import build_model


@pytest.fixture(params=list(Architecture))
def model(request, tiny_config):
    return build_model(tiny_config(request.param))


class TestRoundTrip:
    def test_params_and_config_survive(self, model, tmp_path):
        path = save_checkpoint(model, None, tmp_path / "ckpt" / "model.ckpt", metadata={"run": "ह"})
        loaded = load_checkpoint(path)
        assert loaded.model_config == model.config
        assert loaded.metadata == {"run": "ह"}
        restored = loaded.build_model()
        for name, param in model.named_parameters():
            np.testing.assert_array_equal(restored.params[name].data, param.data)

    def test_identical_outputs_after_reload(self, model, tmp_path):
        restored = load_checkpoint(save_checkpoint(model, None, tmp_path / "m.ckpt")).build_model()
        start = model.decoder_start()
        expected = model.next_token_logprobs([5, 6, 7], [start + [8]])
        np.testing.assert_array_equal(restored.next_token_logprobs([5, 6, 7], [start + [8]]), expected)

    def test_optimizer_and_train_state(self, model, tmp_path):
        state = AdamState.zeros(model)
        for name in state.m:
            state.m[name] = state.m[name] + 0.5
        path = save_checkpoint(model, state, tmp_path / "m.ckpt", TrainState(step=7, epoch=2, batch_index=3))
        loaded = load_checkpoint(path)
        assert loaded.train_state == TrainState(step=7, epoch=2, batch_index=3)
        restored = AdamState.from_blocks(loaded.optimizer_blocks, list(model.params))
        for name in state.m:
            np.testing.assert_array_equal(restored.m[name], state.m[name])
            np.testing.assert_array_equal(restored.v[name], state.v[name])
        assert set(loaded.params) == set(model.params)

    def test_bytes_are_deterministic(self, model, tmp_path):
        first = save_checkpoint(model, None, tmp_path / "a.ckpt").read_bytes()
        second = save_checkpoint(model, None, tmp_path / "b.ckpt").read_bytes()
        assert first == second


class TestCorruption:
    def test_truncated_file(self, model, tmp_path):
        data = save_checkpoint(model, None, tmp_path / "m.ckpt").read_bytes()
        for cut in (len(data) - 1, len(data) // 2, 10):
            with pytest.raises(CheckpointError):
                Checkpoint.from_bytes(data[:cut])

    def test_flipped_byte(self, model, tmp_path):
        data = bytearray(save_checkpoint(model, None, tmp_path / "m.ckpt").read_bytes())
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            Checkpoint.from_bytes(bytes(data))

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world" * 10)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="Cannot read"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_mismatched_parameters(self, model, tiny_config):
        checkpoint = Checkpoint(model.config, {k: v for k, v in model.state_dict().items() if k != "tok_emb"})
        with pytest.raises(CheckpointError, match="missing"):
            checkpoint.build_model()
