"""Deterministic step-based training with Adam, loss logging and checkpoints."""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .checkpoint import Checkpoint, TrainState, save_checkpoint
from .data import make_batches
from .errors import TrainingDivergedError
from .models import LossLog, LossRecord, TrainConfig, TrainingExample
from .tensor import backward, no_grad
from .transformer import TranslationModel

logger = logging.getLogger(__name__)

FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class AdamState:
    """First and second moments per parameter name."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, model: TranslationModel) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in model.named_parameters()},
            v={name: np.zeros_like(p.data) for name, p in model.named_parameters()},
        )

    def to_blocks(self) -> Dict[str, np.ndarray]:
        blocks = {f"adam.m/{name}": value for name, value in self.m.items()}
        blocks.update({f"adam.v/{name}": value for name, value in self.v.items()})
        return blocks

    @classmethod
    def from_blocks(cls, blocks: Mapping[str, np.ndarray], names: Sequence[str]) -> "AdamState":
        missing = [n for n in names if f"adam.m/{n}" not in blocks or f"adam.v/{n}" not in blocks]
        if missing:
            raise ValueError(f"Checkpoint has no optimizer state for {', '.join(missing[:5])}")
        return cls(
            m={n: np.array(blocks[f"adam.m/{n}"]) for n in names},
            v={n: np.array(blocks[f"adam.v/{n}"]) for n in names},
        )


def learning_rate_at(tc: TrainConfig, step: int) -> float:
    """Linear warmup over ``warmup_steps``, constant afterwards."""
    if tc.warmup_steps and step < tc.warmup_steps:
        return tc.learning_rate * step / tc.warmup_steps
    return tc.learning_rate


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    tc: TrainConfig,
    step: int,
) -> Tuple[Mapping[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` and ``state`` in place."""
    if step < 1:
        raise ValueError(f"Adam step must be >= 1, got {step}")
    lr = learning_rate_at(tc, step)
    b1, b2 = tc.adam_beta1, tc.adam_beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step
    for name, param in params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ValueError(f"Gradient for {name} has shape {g.shape}, parameter has {param.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + tc.adam_eps)
    return params, state


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def evaluate_loss(model: TranslationModel, examples: Sequence[TrainingExample], batch_size: int) -> float:
    """Token-weighted mean cross-entropy over ``examples`` (no dropout, no graph)."""
    total = 0.0
    tokens = 0
    with no_grad():
        for batch in make_batches(examples, batch_size, shuffle=False):
            n = batch.n_target_tokens
            total += model.loss(batch).item() * n
            tokens += n
    return total / tokens


@dataclass
class TrainResult:
    model: TranslationModel
    loss_log: LossLog
    checkpoints: List[Path] = field(default_factory=list)
    optimizer: Optional[AdamState] = None
    state: TrainState = field(default_factory=TrainState)


def train(
    model: TranslationModel,
    dataset: Sequence[TrainingExample],
    tc: TrainConfig,
    eval_set: Optional[Sequence[TrainingExample]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Checkpoint] = None,
    metadata: Optional[Dict[str, Any]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Run ``tc.max_steps`` optimizer steps over ``dataset``.

    Batches are reshuffled per epoch from ``(tc.seed, epoch)`` and dropout
    draws from ``(tc.seed, step)``, so a run resumed from a checkpoint follows
    the uninterrupted trajectory exactly. With ``checkpoint_dir`` set, a
    checkpoint is written every ``checkpoint_every`` steps and always at the end.
    """
    errors = tc.validate()
    if errors:
        raise ValueError(f"Invalid train config: {'; '.join(errors)}")
    examples = list(dataset)
    if not examples:
        raise ValueError("Cannot train on an empty dataset")
    eval_examples = list(eval_set or [])
    names = [name for name, _ in model.named_parameters()]

    optimizer = AdamState.zeros(model)
    step = epoch = batch_index = 0
    if resume is not None:
        model.load_state_dict(resume.params)
        optimizer = AdamState.from_blocks(resume.optimizer_blocks, names)
        step = resume.train_state.step
        epoch = resume.train_state.epoch
        batch_index = resume.train_state.batch_index
        logger.info(f"Resuming from step {step} (epoch {epoch}, batch {batch_index})")

    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    checkpoints: List[Path] = []
    loss_log = LossLog()
    batches = make_batches(examples, tc.batch_size, seed=tc.seed, epoch=epoch)
    window: List[float] = []
    started = time.perf_counter()

    while step < tc.max_steps:
        if batch_index >= len(batches):
            epoch += 1
            batch_index = 0
            batches = make_batches(examples, tc.batch_size, seed=tc.seed, epoch=epoch)
        batch = batches[batch_index]
        rng = np.random.default_rng([tc.seed, step]) if model.config.dropout_rate > 0 else None

        model.zero_grad()
        loss = model.loss(batch, rng)
        value = loss.item()
        if not math.isfinite(value):
            logger.error(f"Training diverged at step {step + 1}, batch {batch_index} of epoch {epoch}")
            raise TrainingDivergedError(step + 1, batch_index, value)
        backward(loss)
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in model.named_parameters()
        }
        if tc.grad_clip_norm is not None:
            clip_grad_norm(grads, tc.grad_clip_norm)

        step += 1
        batch_index += 1
        adam_step({name: p.data for name, p in model.named_parameters()}, grads, optimizer, tc, step)
        window.append(value)
        if on_step is not None:
            on_step(step, value)

        if step % tc.log_every == 0 or step == tc.max_steps:
            train_loss = float(np.mean(window))
            window = []
            val_loss = evaluate_loss(model, eval_examples, tc.batch_size) if eval_examples else None
            seconds = time.perf_counter() - started if tc.record_wall_clock else None
            loss_log.append(LossRecord(step, train_loss, val_loss, seconds))
            logger.info(
                f"step {step}/{tc.max_steps} train_loss={train_loss:.4f}"
                + (f" val_loss={val_loss:.4f}" if val_loss is not None else "")
                + f" lr={learning_rate_at(tc, step):.2e}"
            )

        if checkpoint_dir is not None:
            state = TrainState(step=step, epoch=epoch, batch_index=batch_index)
            if step == tc.max_steps:
                path = checkpoint_dir / FINAL_CHECKPOINT
            elif tc.checkpoint_every and step % tc.checkpoint_every == 0:
                path = checkpoint_dir / f"ckpt_step{step:06d}.ckpt"
            else:
                continue
            checkpoints.append(save_checkpoint(model, optimizer, path, state, metadata))

    return TrainResult(
        model=model,
        loss_log=loss_log,
        checkpoints=checkpoints,
        optimizer=optimizer,
        state=TrainState(step=step, epoch=epoch, batch_index=batch_index),
    )
