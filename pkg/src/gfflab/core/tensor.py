"""Tensor type and the reverse-mode autodiff machinery.

Every differentiable operation produces a :class:`Tensor` whose ``node``
records its inputs and a backward rule. Nodes carry a global sequence
number, so the graph is ordered by insertion and ``backward`` simply walks
the reachable nodes from the newest to the oldest.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

PRECISIONS = {"bits32": np.float32, "bits64": np.float64}

_local = threading.local()
_seq = itertools.count()


def get_precision() -> str:
    return getattr(_local, "precision", "bits32")


def default_dtype():
    return PRECISIONS[get_precision()]


@contextmanager
def precision(mode: str):
    """Temporarily switch the dtype used for newly created tensors."""
    if mode not in PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}")
    prev = get_precision()
    _local.precision = mode
    try:
        yield
    finally:
        _local.precision = prev


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    """One operation record in the autodiff graph."""

    __slots__ = ("seq", "inputs", "backward_fn", "name", "out_shape")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, name: str, out_shape=()):
        self.seq = next(_seq)
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name
        self.out_shape = tuple(out_shape)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate gradients into every reachable leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        if self.node is None:
            if self.requires_grad:
                self.grad = grad.copy() if self.grad is None else self.grad + grad
            return

        owners = {}
        stack = [self]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.seq in owners:
                continue
            owners[n.seq] = t
            stack.extend(i for i in n.inputs if i.node is not None)

        pending = {id(self): grad}
        for seq in sorted(owners, reverse=True):
            out = owners[seq]
            g = pending.pop(id(out), None)
            if g is None:
                continue
            in_grads = out.node.backward_fn(g)
            for inp, gi in zip(out.node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise RuntimeError(
                        f"{out.node.name}: backward produced {gi.shape} for input of shape {inp.shape}"
                    )
                if inp.node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.mul(self, -1.0), other)

    def sum(self):
        from . import ops
        return ops.sum(self)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    """Wrap an op's forward result, recording a graph node when needed."""
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name}: non-finite value in forward output")
    out = Tensor(data, dtype=data.dtype)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, backward_fn, name, data.shape)
    return out


def walk_graph(root: Tensor) -> list[Node]:
    """Nodes reachable from ``root`` in insertion order."""
    seen = {}
    stack = [root]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or n.seq in seen:
            continue
        seen[n.seq] = n
        stack.extend(n.inputs)
    return [seen[k] for k in sorted(seen)]


def check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed precision in one graph: {sorted(str(d) for d in dtypes)}")


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)
