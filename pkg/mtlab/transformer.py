"""Decoder-only and encoder-decoder transformers on top of ``mtlab.tensor``.

Both architectures share one block design (pre-layer-norm, GELU feed-forward,
learned absolute positions, head tied to the token embedding by default), so
they differ only in how the encoder and decoder stacks are wired.
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import CheckpointError, ShapeError
from .models import Architecture, ModelConfig
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    log_softmax_array,
    matmul,
    no_grad,
    reshape,
    scale,
    softmax,
    transpose,
)
from .tokenizer import BOS_ID

logger = logging.getLogger(__name__)

INIT_STD = 0.02

_ATTN_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention: softmax(q kᵀ / √d_k, masked) · v.

    Works on plain ``[n, d_k]`` operands or on any matching leading axes.
    ``mask`` is boolean, True where a key is visible, broadcastable to
    ``[..., n, m]``; every query row needs at least one visible key.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1, mask=mask), v)


def _causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _key_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    """[B, 1, 1, width] visibility of real (non-pad) key positions."""
    return (np.arange(width)[None, :] < np.asarray(lengths)[:, None])[:, None, None, :]


def _attn_size(d: int) -> int:
    return 4 * d * d + 4 * d


def _ffn_size(d: int, d_ff: int) -> int:
    return 2 * d * d_ff + d_ff + d


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for ``config``, independent of any built model."""
    d, vocab = config.d_model, config.vocab_size
    total = vocab * d
    if config.position_embeddings:
        total += config.max_seq_len * d
    if not config.tie_embeddings:
        total += d * vocab
    ln = 2 * d
    if config.architecture is Architecture.DECODER_ONLY:
        n = config.decoder_layers
        total += n * (_attn_size(d) + _ffn_size(d, config.d_ff) + 2 * ln)
        total += ln if n else 0
        return total
    n_enc, n_dec = config.encoder_layers, config.decoder_layers
    total += n_enc * (_attn_size(d) + _ffn_size(d, config.d_ff) + 2 * ln) + (ln if n_enc else 0)
    total += n_dec * (2 * _attn_size(d) + _ffn_size(d, config.d_ff) + 3 * ln) + (ln if n_dec else 0)
    return total


def parameter_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter name and shape, in initialization order."""
    d, d_ff, vocab = config.d_model, config.d_ff, config.vocab_size
    layout: List[Tuple[str, Tuple[int, ...]]] = [("tok_emb", (vocab, d))]
    if config.position_embeddings:
        layout.append(("pos_emb", (config.max_seq_len, d)))

    def norm(prefix: str) -> None:
        layout.extend([(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))])

    def attn(prefix: str) -> None:
        for name in _ATTN_PARAMS:
            layout.append((f"{prefix}.{name}", (d, d) if name.startswith("w") else (d,)))

    def ffn(prefix: str) -> None:
        layout.extend([
            (f"{prefix}.w1", (d, d_ff)), (f"{prefix}.b1", (d_ff,)),
            (f"{prefix}.w2", (d_ff, d)), (f"{prefix}.b2", (d,)),
        ])

    encoder_decoder = config.architecture is Architecture.ENCODER_DECODER
    for i in range(config.encoder_layers):
        norm(f"enc.{i}.ln1"); attn(f"enc.{i}.attn"); norm(f"enc.{i}.ln2"); ffn(f"enc.{i}.ffn")
    if config.encoder_layers:
        norm("enc.ln_f")
    for i in range(config.decoder_layers):
        norm(f"dec.{i}.ln1"); attn(f"dec.{i}.attn")
        if encoder_decoder:
            norm(f"dec.{i}.lnx"); attn(f"dec.{i}.xattn")
        norm(f"dec.{i}.ln2"); ffn(f"dec.{i}.ffn")
    if config.decoder_layers:
        norm("dec.ln_f")
    if not config.tie_embeddings:
        layout.append(("lm_head", (d, vocab)))
    return layout


def _initial_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b"):
        return np.zeros(shape)
    return rng.normal(0.0, INIT_STD, size=shape)


class TranslationModel:
    """A transformer in one of the two layouts plus its named parameters.

    Forward passes never mutate parameters, so several threads may run them
    on one model. Only the trainer writes ``Tensor.data`` in place.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params
        self._head_dim = config.d_model // config.n_heads

    @property
    def architecture(self) -> Architecture:
        return self.config.architecture

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def max_seq_len(self) -> int:
        return self.config.max_seq_len

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        expected = dict(parameter_layout(self.config))
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            extra = sorted(set(state) - set(expected))
            raise CheckpointError(f"Parameter names differ from the model: missing={missing} unexpected={extra}")
        for name, shape in expected.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != shape:
                raise CheckpointError(f"Parameter {name} has shape {value.shape}, expected {shape}")
            self.params[name].data = value.copy()

    # -- building blocks -------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"), self.config.layer_norm_eps)

    def _split_heads(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return transpose(reshape(x, (batch, length, self.config.n_heads, self._head_dim)), (0, 2, 1, 3))

    def _project(self, prefix: str, x: Tensor, w: str, b: str) -> Tensor:
        return add(matmul(x, self._p(f"{prefix}.{w}")), self._p(f"{prefix}.{b}"))

    def _attend(self, prefix: str, x_q: Tensor, x_kv: Tensor, mask: Optional[np.ndarray]) -> Tensor:
        q = self._split_heads(self._project(prefix, x_q, "wq", "bq"))
        k = self._split_heads(self._project(prefix, x_kv, "wk", "bk"))
        v = self._split_heads(self._project(prefix, x_kv, "wv", "bv"))
        context = attention(q, k, v, mask)
        batch, _, length, _ = context.shape
        merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, length, self.config.d_model))
        return self._project(prefix, merged, "wo", "bo")

    def _self_attention(self, prefix: str, x: Tensor, mask: np.ndarray) -> Tensor:
        normed = self._norm(f"{prefix}.ln1", x)
        return self._attend(f"{prefix}.attn", normed, normed, mask)

    def _feed_forward(self, prefix: str, x: Tensor) -> Tensor:
        hidden = gelu(self._project(prefix, x, "w1", "b1"))
        return self._project(prefix, hidden, "w2", "b2")

    def _residual(self, x: Tensor, update: Tensor, rng: Optional[np.random.Generator]) -> Tensor:
        return add(x, dropout(update, self.config.dropout_rate, rng))

    def _embed(self, ids: np.ndarray, rng: Optional[np.random.Generator]) -> Tensor:
        x = embedding(self._p("tok_emb"), ids)
        if self.config.position_embeddings:
            x = add(x, embedding(self._p("pos_emb"), np.arange(ids.shape[1])))
        return dropout(x, self.config.dropout_rate, rng)

    def _logits(self, x: Tensor, stack: str, n_layers: int) -> Tensor:
        if n_layers:
            x = self._norm(f"{stack}.ln_f", x)
        head = transpose(self._p("tok_emb")) if self.config.tie_embeddings else self._p("lm_head")
        return matmul(x, head)

    # -- batched forwards ------------------------------------------------

    def _check_batch(self, ids: np.ndarray, lengths: np.ndarray, what: str) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ShapeError(f"{what}: expected a non-empty [batch, length] id array, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_seq_len:
            raise ValueError(f"{what}: length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"{what}: token ids must lie in [0, {self.config.vocab_size})")
        if np.any(np.asarray(lengths) < 1):
            raise ValueError(f"{what}: every sequence needs at least one token")
        return ids

    def _require(self, architecture: Architecture) -> None:
        if self.config.architecture is not architecture:
            raise ValueError(
                f"This operation needs a {architecture.value} model, got {self.config.architecture.value}"
            )

    def decoder_only_logits(self, ids: np.ndarray, lengths: np.ndarray,
                            rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits [B, T, V] for right-padded ``ids``; pads are hidden as keys."""
        self._require(Architecture.DECODER_ONLY)
        ids = self._check_batch(ids, lengths, "decoder input")
        length = ids.shape[1]
        mask = _causal_mask(length)[None, None] & _key_mask(lengths, length)
        x = self._embed(ids, rng)
        for i in range(self.config.decoder_layers):
            x = self._residual(x, self._self_attention(f"dec.{i}", x, mask), rng)
            x = self._residual(x, self._feed_forward(f"dec.{i}.ffn", self._norm(f"dec.{i}.ln2", x)), rng)
        return self._logits(x, "dec", self.config.decoder_layers)

    def encode(self, ids: np.ndarray, lengths: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Encoder memory [B, S, d]; attention is bidirectional over real positions."""
        self._require(Architecture.ENCODER_DECODER)
        ids = self._check_batch(ids, lengths, "encoder input")
        mask = _key_mask(lengths, ids.shape[1])
        x = self._embed(ids, rng)
        for i in range(self.config.encoder_layers):
            x = self._residual(x, self._self_attention(f"enc.{i}", x, mask), rng)
            x = self._residual(x, self._feed_forward(f"enc.{i}.ffn", self._norm(f"enc.{i}.ln2", x)), rng)
        if self.config.encoder_layers:
            x = self._norm("enc.ln_f", x)
        return x

    def decode(self, ids: np.ndarray, lengths: np.ndarray, memory: Tensor, memory_lengths: np.ndarray,
               rng: Optional[np.random.Generator] = None) -> Tensor:
        """Decoder logits [B, T, V] attending causally to ``ids`` and fully to ``memory``."""
        self._require(Architecture.ENCODER_DECODER)
        ids = self._check_batch(ids, lengths, "decoder input")
        length = ids.shape[1]
        self_mask = _causal_mask(length)[None, None] & _key_mask(lengths, length)
        cross_mask = _key_mask(memory_lengths, memory.shape[1])
        x = self._embed(ids, rng)
        for i in range(self.config.decoder_layers):
            x = self._residual(x, self._self_attention(f"dec.{i}", x, self_mask), rng)
            cross = self._attend(f"dec.{i}.xattn", self._norm(f"dec.{i}.lnx", x), memory, cross_mask)
            x = self._residual(x, cross, rng)
            x = self._residual(x, self._feed_forward(f"dec.{i}.ffn", self._norm(f"dec.{i}.ln2", x)), rng)
        return self._logits(x, "dec", self.config.decoder_layers)

    def batch_logits(self, batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits [B, T, V] for a padded ``data.Batch``."""
        if self.config.architecture is Architecture.DECODER_ONLY:
            return self.decoder_only_logits(batch.decoder_input, batch.decoder_lengths, rng)
        memory = self.encode(batch.encoder_input, batch.encoder_lengths, rng)
        return self.decode(batch.decoder_input, batch.decoder_lengths, memory, batch.encoder_lengths, rng)

    def loss(self, batch, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Mean token cross-entropy over the batch's unmasked label positions."""
        logits = self.batch_logits(batch, rng)
        batch_size, length, vocab = logits.shape
        return cross_entropy(reshape(logits, (batch_size * length, vocab)), np.asarray(batch.labels).reshape(-1))

    # -- single-sequence forwards ----------------------------------------

    def forward_decoder_only(self, tokens: Sequence[int]) -> Tensor:
        """Logits [len, V]; row t depends only on tokens[0..t]."""
        self._require(Architecture.DECODER_ONLY)
        ids = np.asarray([list(tokens)], dtype=np.int64)
        logits = self.decoder_only_logits(ids, np.array([ids.shape[1]]))
        return reshape(logits, logits.shape[1:])

    def forward_encoder_decoder(self, src: Sequence[int], tgt: Sequence[int]) -> Tensor:
        """Logits [len(tgt), V]; row t sees all of ``src`` and tgt[0..t]."""
        self._require(Architecture.ENCODER_DECODER)
        src_ids = np.asarray([list(src)], dtype=np.int64)
        tgt_ids = np.asarray([list(tgt)], dtype=np.int64)
        memory = self.encode(src_ids, np.array([src_ids.shape[1]]))
        logits = self.decode(tgt_ids, np.array([tgt_ids.shape[1]]), memory, np.array([src_ids.shape[1]]))
        return reshape(logits, logits.shape[1:])

    # -- scoring interface used by generation ------------------------------

    def decoder_start(self) -> List[int]:
        """Tokens every decoder-side hypothesis begins with."""
        return [BOS_ID] if self.config.architecture is Architecture.ENCODER_DECODER else []

    def generation_room(self, conditioning: Sequence[int]) -> int:
        """How many tokens may be generated after ``conditioning`` within max_seq_len."""
        if self.config.architecture is Architecture.DECODER_ONLY:
            return self.config.max_seq_len - len(conditioning)
        return self.config.max_seq_len - len(self.decoder_start())

    def next_token_logprobs(self, conditioning: Sequence[int], prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities [n, V] of the token following each prefix.

        For DecoderOnly the model reads ``conditioning + prefix``; for
        EncoderDecoder ``conditioning`` is the encoder input and each prefix is
        the decoder input (starting with ``decoder_start()``).
        """
        if not prefixes:
            return np.zeros((0, self.config.vocab_size))
        with no_grad():
            if self.config.architecture is Architecture.DECODER_ONLY:
                sequences = [list(conditioning) + list(p) for p in prefixes]
                ids, lengths = _pad(sequences)
                logits = self.decoder_only_logits(ids, lengths).data
            else:
                src = np.asarray([list(conditioning)], dtype=np.int64)
                memory = self.encode(src, np.array([src.shape[1]]))
                ids, lengths = _pad([list(p) for p in prefixes])
                repeated = Tensor(np.repeat(memory.data, len(prefixes), axis=0))
                src_lengths = np.full(len(prefixes), src.shape[1])
                logits = self.decode(ids, lengths, repeated, src_lengths).data
        last = logits[np.arange(len(prefixes)), lengths - 1]
        return log_softmax_array(last)


def _pad(sequences: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    ids = np.zeros((len(sequences), int(lengths.max())), dtype=np.int64)
    for row, seq in enumerate(sequences):
        ids[row, :len(seq)] = seq
    return ids, lengths


def build_model(config: ModelConfig) -> TranslationModel:
    """Initialize a model: N(0, 0.02) weights from ``config.seed``, LN gains 1, biases 0."""
    errors = config.validate()
    if errors:
        raise ValueError(f"Invalid model config: {'; '.join(errors)}")
    rng = np.random.default_rng(config.seed)
    params = {
        name: Tensor(_initial_value(name, shape, rng), requires_grad=True, name=name)
        for name, shape in parameter_layout(config)
    }
    model = TranslationModel(config, params)
    logger.info(
        f"Built {config.architecture.value} model with {count_parameters(model):,} parameters "
        f"(enc {config.encoder_layers} / dec {config.decoder_layers} layers, d_model {config.d_model})"
    )
    return model


def count_parameters(model: TranslationModel) -> int:
    """Exact number of scalar parameters."""
    return sum(p.size for p in model.params.values())
