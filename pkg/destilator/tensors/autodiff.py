import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class EmptyTape(RuntimeError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class Tensor:
    """Gost večdimenzionalni tabelarni podatek z neobveznim sledenjem gradientu."""

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._record: Optional["TapeRecord"] = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{name})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._record is None

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __radd__(self, other):
        from .ops import add

        return add(other, self)

    def __sub__(self, other):
        from .ops import sub

        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub

        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    def __rmul__(self, other):
        from .ops import mul

        return mul(other, self)

    def __truediv__(self, other):
        from .ops import div

        return div(self, other)

    def __rtruediv__(self, other):
        from .ops import div

        return div(other, self)

    def __neg__(self):
        from .ops import neg

        return neg(self)

    def __pow__(self, exponent):
        from .ops import power

        return power(self, exponent)

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def __getitem__(self, key):
        from .ops import index

        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        from .ops import sum as sum_

        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from .ops import mean

        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from .ops import reshape

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        from .ops import transpose

        return transpose(self, axes or None)


@dataclass(eq=False)
class TapeRecord:
    op: str
    inputs: tuple
    output: Tensor
    backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ComputationTape:
    """Zaporedje zabeleženih operacij; vhodi operacije so vedno pred njo."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __len__(self):
        return len(self.records)

    def record(self, op, inputs, output, backward_rule):
        record = TapeRecord(op, tuple(inputs), output, backward_rule)
        self.records.append(record)
        output._record = record
        return record

    def clear(self):
        self.records.clear()

    def backward(self, loss: Tensor):
        if loss.size != 1:
            raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise EmptyTape("backward called on an empty tape")
        pending = {id(loss): np.ones_like(loss.data)}
        touched = []
        for record in reversed(self.records):
            upstream = pending.pop(id(record.output), None)
            if upstream is None:
                continue
            input_grads = record.backward_rule(upstream)
            for tensor, grad in zip(record.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if grad.shape != tensor.shape:
                    raise ShapeError(
                        f"{record.op}: backward produced gradient of shape {grad.shape}"
                        f" for an input of shape {tensor.shape}"
                    )
                if tensor.is_leaf:
                    if tensor.grad is None:
                        tensor.grad = np.array(grad, dtype=np.float64)
                    else:
                        tensor.grad = tensor.grad + grad
                    touched.append(tensor)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + grad
                else:
                    pending[id(tensor)] = grad
        for tensor in touched:
            if not np.isfinite(tensor.grad).all():
                raise NonFiniteValue(
                    f"non-finite gradient for {tensor.name or 'a leaf tensor'}"
                )


_tape = contextvars.ContextVar("tape", default=None)
_recording = contextvars.ContextVar("recording", default=True)
_default_tape = ComputationTape()


def current_tape() -> ComputationTape:
    # prazen trak je neresničen, zato primerjamo z None
    tape = _tape.get()
    return _default_tape if tape is None else tape


def is_recording():
    return _recording.get()


@contextlib.contextmanager
def recording():
    """Nov trak za en prehod naprej in nazaj."""
    tape = ComputationTape()
    tape_token = _tape.set(tape)
    recording_token = _recording.set(True)
    try:
        yield tape
    finally:
        _recording.reset(recording_token)
        _tape.reset(tape_token)


@contextlib.contextmanager
def no_grad():
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def backward(loss: Tensor):
    tape = current_tape()
    try:
        tape.backward(loss)
    finally:
        tape.clear()
