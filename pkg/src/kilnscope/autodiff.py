"""Minimal tape-based reverse-mode differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are appended to it; with
no active tape they simply compute values (inference mode).

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = total(x * x)
    ...     tape.backward(y)
    >>> x.grad
    array([6.])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import sparse

from .errors import EmptyMask, EmptySegment, NumericalError, ShapeMismatch

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "_tape", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Append-only operation record; use as a context manager."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``."""
        if loss.values.size != 1:
            raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ValueError("loss was not recorded on this tape")
        adjoint = {id(loss): np.ones_like(loss.values)}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for rec in reversed(self.records[: loss.node_id + 1]):
            g = adjoint.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id is None:
                    if id(inp) in leaves:
                        leaves[id(inp)] = (inp, leaves[id(inp)][1] + gi)
                    else:
                        leaves[id(inp)] = (inp, gi)
                elif id(inp) in adjoint:
                    adjoint[id(inp)] = adjoint[id(inp)] + gi
                else:
                    adjoint[id(inp)] = gi
        # leaf totals are added once so repeated passes accumulate exactly
        for tensor, total_grad in leaves.values():
            if not np.all(np.isfinite(total_grad)):
                raise NumericalError("non-finite gradient")
            tensor.grad = tensor.grad + total_grad


def _emit(values: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.node_id = None
    out._tape = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.records)
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise and linear ops ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from None
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from None
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape),
                            _unbroadcast(g * a.values, b.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.values * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """(m, k) @ (k, n) -> (m, n); a 1-d right operand gives (m,)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def backward(g):
        if b.values.ndim == 1:
            return np.outer(g, b.values), a.values.T @ g
        return g @ b.values.T, a.values.T @ g

    return _emit(out, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {a.shape}")
    return _emit(a.values.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from None
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def total(a) -> Tensor:
    a = as_tensor(a)
    return _emit(np.array(a.values.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),), "total")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    positive = x.values > 0
    out = np.where(positive, x.values, slope * x.values)
    return _emit(out, (x,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def cos_shifted(theta, harmonics, mu) -> Tensor:
    """cos(l * theta - mu).

    With a scalar harmonic ``l`` and scalar ``mu`` the result has theta's
    shape; with ``harmonics`` and ``mu`` of shape (L,) it has shape
    theta.shape + (L,).
    """
    theta, mu = as_tensor(theta), as_tensor(mu)
    ls = np.asarray(harmonics, dtype=np.float64)
    if ls.shape != mu.shape:
        raise ShapeMismatch(f"cos_shifted: harmonics {ls.shape} vs mu {mu.shape}")
    arg = theta.values[..., None] * ls.reshape(-1) - mu.values.reshape(-1)
    if ls.ndim == 0:
        arg = arg[..., 0]
    out = np.cos(arg)

    def backward(g):
        s = np.sin(arg) * g
        if ls.ndim == 0:
            return -s * float(ls), _unbroadcast(s, mu.shape)
        return -(s * ls).sum(axis=-1), s.reshape(-1, ls.size).sum(axis=0).reshape(mu.shape)

    return _emit(out, (theta, mu), backward, "cos_shifted")


# --- indexing / segment ops --------------------------------------------------

def gather(x, index) -> Tensor:
    """Select rows ``x[index]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = x.values[index]

    return _emit(out, (x,), lambda g: (_segment_sum_values(g, index, x.shape[0]),), "gather")


def _segment_sum_values(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(segments, weights=values, minlength=num_segments)
    flat = values.reshape(values.shape[0], -1)
    ones = np.ones(segments.size)
    agg = sparse.csr_matrix((ones, (segments, np.arange(segments.size))),
                            shape=(num_segments, segments.size))
    return np.asarray(agg @ flat).reshape((num_segments,) + values.shape[1:])


def _check_segments(segments, num_segments: int, length: int) -> np.ndarray:
    segments = np.asarray(segments, dtype=np.intp)
    if segments.shape != (length,):
        raise ShapeMismatch(f"segments has shape {segments.shape}, expected ({length},)")
    if length and (segments.min() < 0 or segments.max() >= num_segments):
        raise ShapeMismatch("segment id out of range")
    return segments


def segment_sum(x, segments, num_segments: int) -> Tensor:
    x = as_tensor(x)
    segments = _check_segments(segments, num_segments, x.shape[0])
    out = _segment_sum_values(x.values, segments, num_segments)
    return _emit(out, (x,), lambda g: (g[segments],), "segment_sum")


def segment_softmax(scores, segments, num_segments: int) -> Tensor:
    """Softmax of a 1-d score vector taken independently within each segment."""
    scores = as_tensor(scores)
    if scores.values.ndim != 1:
        raise ShapeMismatch("segment_softmax expects a 1-d score vector")
    if scores.values.size == 0:
        raise EmptySegment("segment_softmax called with no scores")
    segments = _check_segments(segments, num_segments, scores.shape[0])
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, scores.values)
    ex = np.exp(scores.values - seg_max[segments])
    denom = _segment_sum_values(ex, segments, num_segments)
    out = ex / denom[segments]

    def backward(g):
        dot = _segment_sum_values(out * g, segments, num_segments)
        return (out * (g - dot[segments]),)

    return _emit(out, (scores,), backward, "segment_softmax")


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, labels, class_weights, mask) -> Tensor:
    """-(1/|L|) * sum_{i in L} w[y_i] * log softmax(logits_i)[y_i]."""
    logits = as_tensor(logits)
    if logits.values.ndim != 2:
        raise ShapeMismatch("logits must be (N, C)")
    n, c = logits.shape
    labels = np.asarray(labels)
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ShapeMismatch(f"class_weights has shape {weights.shape}, expected ({c},)")
    mask = np.asarray(mask)
    idx = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.intp)
    if idx.size == 0:
        raise EmptyMask("no labeled nodes in the loss mask")
    y = labels[idx].astype(np.intp)
    if y.min() < 0 or y.max() >= c:
        raise ShapeMismatch("label outside [0, C)")
    logp = log_softmax_values(logits.values[idx])
    w = weights[y]
    loss = -(w * logp[np.arange(idx.size), y]).sum() / idx.size

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(idx.size), y] -= 1.0
        grad = np.zeros_like(logits.values)
        grad[idx] = probs * (w / idx.size)[:, None] * g
        return (grad,)

    return _emit(np.array(loss), (logits,), backward, "weighted_cross_entropy")


# --- utilities ---------------------------------------------------------------

def backward(loss: Tensor) -> None:
    if loss._tape is None:
        raise ValueError("loss is not attached to a tape")
    loss._tape.backward(loss)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            eps: float = 1e-5, abs_floor: float = 1e-7) -> float:
    """Max componentwise relative error between analytic and central-difference grads.

    ``f`` rebuilds the scalar loss from the current parameter values. The
    relative error of one component is |a - n| / max(|a|, |n|, abs_floor).
    """
    zero_grads(params)
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.reshape(-1)
        flat = p.values.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = float(f().values)
            flat[k] = orig - eps
            down = float(f().values)
            flat[k] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[k])
            denom = max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
