"""Shipped model configurations and experiment-matrix presets."""

from typing import Any, Dict

from .models import Architecture, ModelConfig, Regime

# Parameter-matched pair: 6 decoder layers vs 3+3 encoder-decoder layers at
# d_model 64. Without embeddings the counts are 349,568 and 350,464.
PARITY_PRESETS: Dict[Architecture, Dict[str, Any]] = {
    Architecture.DECODER_ONLY: {
        "d_model": 64,
        "n_heads": 4,
        "n_layers": 6,
        "d_ff": 320,
        "max_seq_len": 256,
    },
    Architecture.ENCODER_DECODER: {
        "d_model": 64,
        "n_heads": 4,
        "n_layers": 3,
        "n_enc_layers": 3,
        "n_dec_layers": 3,
        "d_ff": 256,
        "max_seq_len": 256,
    },
}

# Small enough for CPU memorization probes and smoke runs.
TINY_MODEL: Dict[str, Any] = {
    "d_model": 32,
    "n_heads": 4,
    "n_layers": 2,
    "d_ff": 64,
    "max_seq_len": 128,
}

# Six-cell matrix: decoder-only skips the many-source regimes.
REDUCED_CELLS = frozenset({
    (Architecture.DECODER_ONLY, Regime.ONE_TO_ONE),
    (Architecture.DECODER_ONLY, Regime.ONE_TO_MANY),
    (Architecture.ENCODER_DECODER, Regime.ONE_TO_ONE),
    (Architecture.ENCODER_DECODER, Regime.MANY_TO_ONE),
    (Architecture.ENCODER_DECODER, Regime.ONE_TO_MANY),
    (Architecture.ENCODER_DECODER, Regime.MANY_TO_MANY),
})

CELL_FILTERS = ("full", "reduced")


def parity_configs(vocab_size: int, seed: int = 0) -> Dict[Architecture, ModelConfig]:
    return {
        architecture: ModelConfig(architecture=architecture, vocab_size=vocab_size, seed=seed, **settings)
        for architecture, settings in PARITY_PRESETS.items()
    }


def smoke_experiment(name: str, corpora: Dict[str, Any], output_dir: str = "runs") -> Dict[str, Any]:
    """A small end-to-end experiment over toy corpora, as a config dict.

    ``corpora`` maps ``"src-tgt"`` to a corpus path.
    """
    entries = []
    targets = set()
    for direction, path in sorted(corpora.items()):
        src, tgt = direction.split("-", 1)
        entries.append({"path": str(path), "src_lang": src, "tgt_lang": tgt})
        targets.add(tgt)
    sources = sorted({e["src_lang"] for e in entries})
    regime = Regime.ONE_TO_MANY if len(targets) > 1 else Regime.ONE_TO_ONE
    return {
        "name": name,
        "seed": 0,
        "output_dir": output_dir,
        "corpora": entries,
        "data": {"min_chars": 0, "max_chars": 200, "test_size": 0.1},
        "tokenizer": {"vocab_size": 300},
        "architectures": [a.value for a in Architecture],
        "regimes": [{"regime": regime.value, "source_langs": sources, "target_langs": sorted(targets)}],
        "model": dict(TINY_MODEL),
        "train": {"max_steps": 200, "batch_size": 8, "warmup_steps": 20, "learning_rate": 0.003, "log_every": 20},
        "generation": {"max_new_tokens": 60, "beam_width": 2},
        "metrics": {"bucket_edges": [20, 40]},
    }
