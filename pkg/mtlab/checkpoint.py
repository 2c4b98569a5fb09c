"""Binary checkpoint files for models and their optimizer state.

Layout (all integers little-endian)::

    b"MTLCKPT1"
    u64 header length, UTF-8 JSON header (sorted keys)
    u32 block count, then per block:
        u32 name length, UTF-8 name, u32 ndim, ndim x u64 dims, float64 data
    u64 payload length, 32-byte SHA-256 of the payload

The payload is everything before the footer. Parameter blocks come first in
model layout order, then optimizer blocks (``adam.m/<name>``, ``adam.v/<name>``).
"""

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import CheckpointError
from .models import ModelConfig
from .transformer import TranslationModel, build_model

logger = logging.getLogger(__name__)

MAGIC = b"MTLCKPT1"
FORMAT_VERSION = 1
_FOOTER_SIZE = 8 + 32
OPTIMIZER_PREFIXES = ("adam.m/", "adam.v/")


@dataclass(frozen=True)
class TrainState:
    """Where training stands: optimizer steps taken and the data cursor."""
    step: int = 0
    epoch: int = 0
    batch_index: int = 0


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    optimizer_blocks: Dict[str, np.ndarray] = field(default_factory=dict)
    train_state: TrainState = field(default_factory=TrainState)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def build_model(self) -> TranslationModel:
        model = build_model(self.model_config)
        model.load_state_dict(self.params)
        return model

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {
                "format_version": FORMAT_VERSION,
                "model_config": self.model_config.to_dict(),
                "train_state": asdict(self.train_state),
                "metadata": self.metadata,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        ).encode("utf-8")
        parts = [MAGIC, struct.pack("<Q", len(header)), header]
        blocks = list(self.params.items()) + list(self.optimizer_blocks.items())
        parts.append(struct.pack("<I", len(blocks)))
        for name, array in blocks:
            parts.append(_encode_block(name, array))
        payload = b"".join(parts)
        return payload + struct.pack("<Q", len(payload)) + hashlib.sha256(payload).digest()

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < len(MAGIC) + 8 + 4 + _FOOTER_SIZE or not data.startswith(MAGIC):
            raise CheckpointError("Not an mtlab checkpoint or file truncated")
        payload_len = struct.unpack_from("<Q", data, len(data) - _FOOTER_SIZE)[0]
        payload = data[:-_FOOTER_SIZE]
        if payload_len != len(payload):
            raise CheckpointError(
                f"Checkpoint length mismatch: footer records {payload_len} bytes, found {len(payload)} (truncated?)"
            )
        if hashlib.sha256(payload).digest() != data[-32:]:
            raise CheckpointError("Checkpoint checksum mismatch (file corrupt)")

        reader = _Reader(payload, len(MAGIC))
        header = json.loads(reader.take(reader.u64()).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint format version {header.get('format_version')!r}")
        params: Dict[str, np.ndarray] = {}
        optimizer: Dict[str, np.ndarray] = {}
        for _ in range(reader.u32()):
            name = reader.take(reader.u32()).decode("utf-8")
            dims = tuple(reader.u64() for _ in range(reader.u32()))
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            array = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
            target = optimizer if name.startswith(OPTIMIZER_PREFIXES) else params
            target[name] = array
        if reader.offset != len(payload):
            raise CheckpointError(f"{len(payload) - reader.offset} unexpected trailing bytes in checkpoint")
        return cls(
            model_config=ModelConfig.from_dict(header["model_config"]),
            params=params,
            optimizer_blocks=optimizer,
            train_state=TrainState(**header["train_state"]),
            metadata=header.get("metadata", {}),
        )


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, n: int) -> bytes:
        end = self.offset + n
        if end > len(self.data):
            raise CheckpointError("Checkpoint payload ends mid-block")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _encode_block(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(array, dtype="<f8")
    return b"".join([
        struct.pack("<I", len(encoded)),
        encoded,
        struct.pack("<I", array.ndim),
        struct.pack(f"<{array.ndim}Q", *array.shape),
        array.tobytes(order="C"),
    ])


def save_checkpoint(
    model: TranslationModel,
    optimizer_state,
    path: Union[str, Path],
    train_state: Optional[TrainState] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``model`` and optional optimizer state (anything with ``to_blocks()``)."""
    checkpoint = Checkpoint(
        model_config=model.config,
        params=model.state_dict(),
        optimizer_blocks=optimizer_state.to_blocks() if optimizer_state is not None else {},
        train_state=train_state or TrainState(),
        metadata=dict(metadata or {}),
    )
    path = checkpoint.write(path)
    logger.info(f"Wrote checkpoint {path} (step {checkpoint.train_state.step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    return Checkpoint.from_bytes(data)
