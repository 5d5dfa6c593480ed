"""A minimal reverse-mode tape over the functional kernels.

``Var`` wraps an array; ops called with a ``GradTape`` append a record holding
their inputs, output and a backward closure. ``GradTape.backward`` replays
the records in exact reverse order, accumulating ``.grad`` on every input
that requires it. Calling ops with ``tape=None`` runs inference only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F


class Var:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var(shape={self.data.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    name: str
    inputs: Sequence[Var]
    output: Var
    backward: Callable


class GradTape:
    """Ordered log of executed ops; confined to one thread at a time."""

    def __init__(self):
        self.records: list[_Record] = []
        self.replayed: list[str] = []

    def record(self, name, inputs, output, backward):
        self.records.append(_Record(name, tuple(inputs), output, backward))

    def backward(self, output: Var, grad):
        output.grad = grad
        self.replayed = []
        for rec in reversed(self.records):
            self.replayed.append(rec.name)
            g = rec.output.grad
            if g is None:
                continue
            rec.output.grad = None
            grads = rec.backward(g)
            for v, gi in zip(rec.inputs, grads):
                if gi is None or not v.requires_grad:
                    continue
                v.grad = gi if v.grad is None else v.grad + gi
        self.records.clear()


def _needs(*vs):
    return any(v.requires_grad for v in vs)


def _emit(tape, name, inputs, data, backward):
    out = Var(data, _needs(*inputs))
    if tape is not None and out.requires_grad:
        tape.record(name, inputs, out, backward)
    return out


def conv3d(tape, x, w, b, stride=1, counter=None):
    y = F.conv3d(x.data, w.data, b.data, stride, counter=counter)

    def backward(g):
        return F.conv3d_backward(g, x.data, w.data, stride, need_x=x.requires_grad)

    return _emit(tape, "conv3d", (x, w, b), y, backward)


def instance_norm(tape, x, gamma, beta, eps=1e-5):
    y, saved = F.instance_norm(x.data, gamma.data, beta.data, eps)

    def backward(g):
        return F.instance_norm_backward(g, saved, gamma.data)

    return _emit(tape, "instance_norm", (x, gamma, beta), y, backward)


def leaky_relu(tape, x, slope=0.01):
    y = F.leaky_relu(x.data, slope)

    def backward(g):
        return (F.leaky_relu_backward(g, x.data, slope),)

    return _emit(tape, "leaky_relu", (x,), y, backward)


def add(tape, a, b):
    def backward(g):
        return g, g

    return _emit(tape, "add", (a, b), a.data + b.data, backward)


def mul_mask(tape, x, mask):
    """Multiply by a fixed 0/1 mask broadcast over channels."""
    m = mask[:, None].astype(x.data.dtype)

    def backward(g):
        return (g * m,)

    return _emit(tape, "mul_mask", (x,), x.data * m, backward)


def upsample_concat(tape, x, skip, w, b, counter=None):
    y = F.upsample_concat(x.data, skip.data, w.data, b.data, counter=counter)

    def backward(g):
        return F.upsample_concat_backward(g, x.data, skip.data, w.data)

    return _emit(tape, "upsample_concat", (x, skip, w, b), y, backward)


def parameter(array):
    return Var(np.asarray(array), requires_grad=True)
