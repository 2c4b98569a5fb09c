"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable operation returns a new Tensor. When gradients are enabled
and an input requires them, the result remembers its parents and a closure
mapping the upstream gradient to one gradient per parent. ``Tape.record``
orders that graph topologically and ``Tape.backward`` walks it in reverse,
visiting every node once.

Broadcasting is deliberately narrow: elementwise binary ops accept operands of
identical shape, or a second operand whose shape is a suffix of the first
(bias-add, position-add). Everything else is per-row along the last axis.
"""

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError

IGNORE_INDEX = -100

ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    """Whether operations on this thread currently record a graph."""
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.array(data, dtype=np.float64)
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"Tensor dimensions must be positive, got shape {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, op: str) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor.op = op
        tensor._parents = ()
        tensor._backward = None
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, _as_tensor(other))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, _as_tensor(other))

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(array: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor._wrap(array, op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _leading_axes(full_ndim: int, suffix_ndim: int) -> Tuple[int, ...]:
    return tuple(range(full_ndim - suffix_ndim))


def _check_suffix(a: Tensor, b: Tensor, op: str) -> bool:
    """True when b broadcasts over a's leading axes; raises if shapes are incompatible."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b, with b either the same shape as a or a suffix of a's shape."""
    if b.ndim > a.ndim:
        return add(b, a)
    broadcast = _check_suffix(a, b, "add")
    lead = _leading_axes(a.ndim, b.ndim)

    def backward(g: np.ndarray):
        return g, (g.sum(axis=lead) if broadcast else g)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _check_suffix(a, b, "sub")
    lead = _leading_axes(a.ndim, b.ndim)

    def backward(g: np.ndarray):
        gb = -g.sum(axis=lead) if broadcast else -g
        return g, gb

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with the same broadcasting rule as ``add``."""
    if b.ndim > a.ndim:
        return mul(b, a)
    broadcast = _check_suffix(a, b, "mul")
    lead = _leading_axes(a.ndim, b.ndim)

    def backward(g: np.ndarray):
        gb = g * a.data
        return g * b.data, (gb.sum(axis=lead) if broadcast else gb)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * factor,)

    return _result(x.data * factor, (x,), backward, "scale")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(original),)

    return _result(x.data.reshape(tuple(shape)), (x,), backward, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g: np.ndarray):
        return (g.transpose(inverse),)

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a plain matrix shared across a's leading axes, or has
    exactly a's leading axes.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    shared_b = b.ndim == 2
    if not shared_b and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")

    def backward(g: np.ndarray):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared_b:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    def backward(g: np.ndarray):
        return (np.full(x.shape, float(g)),)

    return _result(np.array(x.data.sum()), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(reduce_sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# Neural-network ops
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    ``mask`` (broadcastable boolean, True = visible) forces hidden entries to
    exactly zero probability. Every slice must keep at least one visible entry.
    """
    data = x.data
    if mask is not None:
        visible = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not visible.any(axis=axis).all():
            raise ValueError("softmax: a slice has every entry masked (fully-masked query row)")
        shifted = np.where(visible, data, -np.inf)
        peak = shifted.max(axis=axis, keepdims=True)
        exps = np.where(visible, np.exp(shifted - peak), 0.0)
    else:
        peak = data.max(axis=axis, keepdims=True)
        exps = np.exp(data - peak)
    probs = exps / exps.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return _result(probs, (x,), backward, "softmax")


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    """Numerically stable log-softmax over the last axis of a plain array."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row (last axis) to zero mean and unit variance, then apply gain and bias."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must both be ({width},)"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    lead = _leading_axes(x.ndim, 1)

    def backward(g: np.ndarray):
        g_normed = g * gain.data
        gx = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        return gx, (g * normed).sum(axis=lead), g.sum(axis=lead)

    return _result(normed * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))

    def backward(g: np.ndarray):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result(0.5 * v * (1.0 + t), (x,), backward, "gelu")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ValueError(f"embedding: ids must lie in [0, {rows}), got range [{ids.min()}, {ids.max()}]")

    def backward(g: np.ndarray):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)

    def backward(g: np.ndarray):
        return (g * keep,)

    return _result(x.data * keep, (x,), backward, "dropout")


def cross_entropy(logits: Tensor, targets: Sequence[int], ignore_id: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``ignore_id``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [n, V], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} logit rows but {targets.shape[0]} targets")
    rows = np.nonzero(targets != ignore_id)[0]
    if rows.size == 0:
        raise ValueError("cross_entropy: every position is ignored")
    picked = targets[rows]
    if picked.min() < 0 or picked.max() >= vocab:
        raise ValueError(f"cross_entropy: targets must lie in [0, {vocab}) or equal {ignore_id}")

    log_probs = log_softmax_array(logits.data)
    count = rows.size
    loss = -log_probs[rows, picked].sum() / count

    def backward(g: np.ndarray):
        grad = np.zeros_like(logits.data)
        grad[rows] = np.exp(log_probs[rows])
        grad[rows, picked] -= 1.0
        return (grad * (float(g) / count),)

    return _result(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# Tape and backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of every node that contributed to ``root``.

    Inputs always precede the operations that consume them, so a reverse walk
    sees each node after all of its consumers.
    """

    def __init__(self, root: Tensor, nodes: List[Tensor]):
        self.root = root
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(root, order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self) -> None:
        """Populate ``grad`` on every node; repeated calls give bit-identical results."""
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            upstream = grads.get(id(node))
            if upstream is None or node._backward is None:
                continue
            for parent, g in zip(node._parents, node._backward(upstream)):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise ShapeError(f"{node.op} produced gradient {g.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + g if key in grads else g
        for node in self.nodes:
            g = grads.get(id(node))
            node.grad = np.zeros_like(node.data) if g is None else np.array(g, dtype=np.float64)


def backward(loss: Tensor) -> Tape:
    """Run reverse-mode differentiation from a scalar ``loss`` and return its tape."""
    if loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor that requires grad")
    tape = Tape.record(loss)
    tape.backward()
    return tape
