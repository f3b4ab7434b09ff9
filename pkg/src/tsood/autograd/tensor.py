"""Dense tensor and the define-by-run gradient tape.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        y = (x * x).sum()
    grads = tape.backward(y, wrt=[x])
    grads[x]  # -> Tensor with x's shape

Outside a ``Tape`` block every op is a plain forward computation, which is
what scoring and evaluation use.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Raised by a kernel when its operand shapes are incompatible."""

    def __init__(self, kernel: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        shown = " and ".join(str(tuple(s)) for s in shapes)
        msg = f"{kernel}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.kernel = kernel
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    """Raised when a kernel receives NaN or Inf."""

    def __init__(self, kernel: str) -> None:
        super().__init__(f"{kernel}: non-finite input (NaN or Inf)")
        self.kernel = kernel


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float array that can take part in reverse-mode differentiation.

    ``data`` is stored as float32 unless an explicit dtype is given; kernel
    outputs keep whatever dtype numpy promotion yields, so a float64 leaf
    makes a whole computation float64 (used by gradient checks).
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Kernel outputs: keep the computed dtype (no cast).
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = next(_node_ids)
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; the kernels live in ops.py.
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, idx):
        return _ops().slice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return _ops().max(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().transpose(self, axes or None)

    @property
    def T(self):
        return _ops().transpose(self, None)


def _ops():
    from . import ops

    return ops


@dataclass
class _Record:
    out_id: int
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradientMap(dict):
    """``node_id -> Tensor`` map that also accepts the tensor itself as key."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().get(key, default)


class Tape:
    """Ordered record of primitive ops, consumed by one ``backward`` call."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False
        self._active = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed; start a new Tape")
        _stack().append(self)
        self._active = True
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        self._active = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Iterable[Tensor], vjp) -> None:
        out.requires_grad = True
        out._tape = self
        self.records.append(_Record(out.node_id, tuple(inputs), vjp))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] = ()) -> GradientMap:
        """Return d(loss)/d(t) for every leaf reached, plus any tensor in ``wrt``.

        Tensors in ``wrt`` that the loss does not depend on get zero gradients.
        """
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss is not connected to this tape")

        produced = {r.out_id for r in self.records}
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones(loss.shape, dtype=loss.dtype)
        }
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError("backward", gi.shape, t.shape, detail="gradient shape")
                if t.node_id in grads:
                    grads[t.node_id] = grads[t.node_id] + gi
                else:
                    grads[t.node_id] = gi
                if t.node_id not in produced:
                    leaves[t.node_id] = t

        out = GradientMap()
        for nid, t in leaves.items():
            out[nid] = Tensor._wrap(np.asarray(grads[nid], dtype=t.dtype))
        if loss.node_id not in produced:
            out[loss.node_id] = Tensor._wrap(np.ones(loss.shape, dtype=loss.dtype))
        for t in wrt:
            if t.node_id not in out:
                out[t.node_id] = Tensor._wrap(np.zeros(t.shape, dtype=t.dtype))
        self.records = []
        self.consumed = True
        return out


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def backward(loss: Tensor, wrt: Iterable[Tensor] = ()) -> GradientMap:
    """Run the backward pass on the tape that produced ``loss``."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    return loss._tape.backward(loss, wrt)


class no_record:
    """Temporarily hide the active tape (e.g. for finite-difference probes)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)
