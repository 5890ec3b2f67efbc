"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive appends one record to a process-global tape; ``backward``
replays the records in exact reverse execution order and accumulates
vector-Jacobian products, so a parameter used several times in one forward
pass (recurrent weight sharing) receives the sum of its per-use gradients.
One tape supports exactly one backward pass: the tape resets afterwards and
a stale loss is rejected.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class TapeError(RuntimeError):
    """Invalid tape usage: non-scalar loss, detached loss, or double backward."""


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """N-dimensional float64 array with optional gradient state.

    ``requires_grad`` marks a leaf as trainable; after a backward pass its
    ``grad`` holds an ndarray of the same shape. Tensors produced by
    primitives carry gradient history internally but never expose ``grad``
    unless explicitly marked trainable.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_needs", "_epoch")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._needs = self.requires_grad
        self._epoch: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        grad = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad}{tag})"


class _Record:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class _Tape:
    def __init__(self):
        self.records: list[_Record] = []
        self.epoch = 0
        self.paused = False

    def reset(self) -> None:
        self.records.clear()
        self.epoch += 1


_TAPE = _Tape()


def taping() -> bool:
    """True when primitives currently record gradient history."""
    return not _TAPE.paused


def record(
    op: str,
    out: Tensor,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> None:
    """Attach a primitive to the tape. Call only when some input needs grad."""
    out._needs = True
    out._epoch = _TAPE.epoch
    _TAPE.records.append(_Record(op, out, tuple(inputs), vjp))


def wants_grad(*inputs: Tensor) -> bool:
    """Whether an op consuming ``inputs`` must record itself on the tape."""
    return not _TAPE.paused and any(t._needs for t in inputs)


@contextlib.contextmanager
def no_grad():
    """Suspend taping; outputs created inside carry no gradient history."""
    prev = _TAPE.paused
    _TAPE.paused = True
    try:
        yield
    finally:
        _TAPE.paused = prev


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every trainable tensor the scalar loss reaches.

    Gradients add into any existing ``grad`` (clear via the optimizer or
    ``clear_grad``). The tape is consumed: a second backward without a fresh
    forward pass raises ``TapeError``.
    """
    if loss.ndim != 0:
        raise TapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._epoch is None:
        raise TapeError("loss has no recorded operations (built under no_grad or constant)")
    if loss._epoch != _TAPE.epoch:
        raise TapeError("tape already consumed by a previous backward; rerun the forward pass")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        leaves[id(loss)] = loss
    try:
        for rec in reversed(_TAPE.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            if rec.out.requires_grad:
                _accumulate(rec.out, g)
            contribs = rec.vjp(g)
            for t, c in zip(rec.inputs, contribs):
                if c is None or not t._needs:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] += c
                else:
                    grads[key] = np.asarray(c, dtype=DTYPE)
                if t.requires_grad:
                    leaves[key] = t
        for key, t in leaves.items():
            if key in grads:
                _accumulate(t, grads[key])
    finally:
        _TAPE.reset()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def first_nonfinite() -> tuple[str, int, tuple[int, ...]] | None:
    """Scan the live tape in execution order for the first non-finite output.

    Returns ``(op, record_index, shape)`` or None. Used by the training loop
    to name the operation that produced a NaN/Inf before the tape resets.
    """
    for i, rec in enumerate(_TAPE.records):
        if not np.all(np.isfinite(rec.out.data)):
            return rec.op, i, rec.out.shape
    return None
