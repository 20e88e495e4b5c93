"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array (float64 by default).  Operations in
:mod:`tkn.engine.ops` record themselves on the active :class:`Tape` whenever
any input lies on a gradient path; :meth:`Tape.backward` replays the record
once, in reverse execution order, accumulating gradients additively into
every visited parameter.

Tapes are dynamic and single-use: build one per forward pass, call
``backward``, discard.  With no tape active the same operations run as plain
numpy forward computations (inference mode, no graph retained).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError

_TAPE_STACK: list["Tape"] = []
_DTYPE_STACK: list[np.dtype] = [np.dtype(np.float64)]


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def default_dtype() -> np.dtype:
    return _DTYPE_STACK[-1]


@contextmanager
def precision(dtype):
    """Scope under which new tensors (including op constants) use ``dtype``.

    Double precision is the default; single precision is the opt-in
    inference mode (training and gradient checks stay in float64).
    """
    dt = np.dtype(dtype)
    if dt.kind != "f":
        raise ValueError(f"precision needs a float dtype, got {dtype}")
    _DTYPE_STACK.append(dt)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


class Tensor:
    """N-dimensional array of real scalars plus autodiff metadata.

    ``requires_grad`` marks trainable leaves.  ``grad`` is populated by
    :meth:`Tape.backward`.  Data is treated as immutable after creation;
    only the optimizer mutates leaf ``data`` in place, outside any tape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_src_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        want = default_dtype()
        if arr.dtype != want:
            arr = arr.astype(want, copy=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._src_tape: Tape | None = None

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array. Callers must not mutate it."""
        return self.data

    def tracked(self) -> bool:
        """True when this tensor lies on the active tape's gradient path."""
        tape = active_tape()
        return tape is not None and (self.requires_grad or self._src_tape is tape)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.shape} dtype={self.dtype}{tag}>"

    # Arithmetic sugar; implementations live in ops to keep a single tape path.
    def __add__(self, other):
        from . import ops

        return ops.add(self, _wrap(other))

    def __radd__(self, other):
        from . import ops

        return ops.add(_wrap(other), self)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, _wrap(other))

    def __rsub__(self, other):
        from . import ops

        return ops.sub(_wrap(other), self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, _wrap(other))

    def __rmul__(self, other):
        from . import ops

        return ops.mul(_wrap(other), self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, _wrap(other))

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, _wrap(other))

    def reshape(self, shape):
        from . import ops

        return ops.reshape(self, shape)

    def transpose(self, axes=None):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


class Tape:
    """Ordered record of executed operations for one forward pass.

    Each entry holds the output tensor, its input tensors, and a gradient
    rule mapping the output cotangent to input cotangents.  ``backward``
    visits entries exactly once, in reverse order; a tensor feeding several
    consumers receives the sum of their contributions.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], grad_fn) -> None:
        """grad_fn(g) -> tuple of cotangents aligned with ``inputs`` (None to skip)."""
        out._src_tape = self
        self._entries.append((out, inputs, grad_fn))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every visited leaf.

        Returns ``{name_or_id: grad}`` for leaves with ``requires_grad``.
        The tape is single-use; calling backward twice is an error.
        """
        if self._spent:
            raise RuntimeError("tape already consumed by a previous backward()")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[str, np.ndarray] = {}
        for out, inputs, grad_fn in reversed(self._entries):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = grad_fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None:
                    continue
                if not (inp.requires_grad or inp._src_tape is self):
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
                if inp.requires_grad and inp._src_tape is not self:
                    # leaf: expose the running total
                    key = inp.name if inp.name is not None else f"tensor@{id(inp)}"
                    leaves[key] = grads[id(inp)]
                    inp.grad = grads[id(inp)]
        return leaves


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Functional alias for :meth:`Tape.backward`."""
    return tape.backward(loss)
