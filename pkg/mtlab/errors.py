"""Exception types raised by mtlab."""

from typing import List, Optional


class ShapeError(ValueError):
    """Operand shapes are incompatible for a tensor operation."""


class TokenizerError(ValueError):
    """Invalid tokenizer construction, file or lookup."""


class CorpusFormatError(ValueError):
    """A corpus line could not be parsed into a sentence pair."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        super().__init__(message)
        self.line_number = line_number


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupt or incompatible."""


class ConfigValidationError(ValueError):
    """An experiment config failed validation; `errors` lists every problem."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        summary = "; ".join(self.errors)
        super().__init__(f"{len(self.errors)} config error(s): {summary}")


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, batch_index: int, loss: float):
        self.step = step
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(f"Non-finite loss {loss!r} at step {step} (batch index {batch_index})")


class StageError(RuntimeError):
    """An experiment stage failed; `stage` names it."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"Stage '{stage}' failed: {cause}")
