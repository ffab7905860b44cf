"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active, and which touch at least
one tracked tensor, are recorded on that tape together with a backward rule.
``Tape.backward`` replays the records in reverse order.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Rng",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "reduce_sum",
    "reduce_mean",
    "square",
    "backward",
    "gradcheck",
    "record",
    "active_tape",
]


class ShapeError(ValueError):
    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}")
        self.op = op
        self.shapes = (tuple(a), tuple(b))


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", tracked" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


class _Node:
    __slots__ = ("id", "kind", "inputs", "output", "backward")

    def __init__(self, id, kind, inputs, output, backward):
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


def active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations for one forward pass.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_id = 0

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def _record(self, kind, inputs, output, backward_fn) -> _Node:
        node = _Node(self._next_id, kind, tuple(inputs), output, backward_fn)
        self._next_id += 1
        self.nodes.append(node)
        output._tape = self
        output._node = node
        output.requires_grad = True
        return node

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def record(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap ``out`` in a Tensor and record it if any input is tracked.

    ``backward_fn(upstream)`` returns one gradient (or None) per input.
    """
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.requires_grad = False
    result._tape = None
    result._node = None
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(kind, inputs, result, backward_fn)
    return result


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

    Intermediate tensors receive their (fresh) gradient in ``grad`` as well.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ValueError("backward: loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"backward[{node.kind}]", gi.shape, inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp._node is None or inp._tape is not tape:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        leaf.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = float(b)
        return record("add_scalar", (a,), a.data + b, lambda g: (g,))
    _check_same("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = float(b)
        return record("sub_scalar", (a,), a.data - b, lambda g: (g,))
    _check_same("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", (a,), a.data * c, lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return record("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return record("reduce_sum", (a,), np.array(a.data.sum()),
                  lambda g: (np.full(shape, float(g)),))


def reduce_mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record("reduce_mean", (a,), np.array(a.data.mean()),
                  lambda g: (np.full(shape, float(g) / n),))


class Rng:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Two instances with the same key produce the same sequence regardless of
    what other streams have drawn.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        bitgen = np.random.Philox(key=self.seed | (self.stream << 64))
        self._gen = np.random.Generator(bitgen)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def spawn(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
              coords: Sequence[int] | int | None = None) -> float:
    """Max relative error between the taped gradient and central differences.

    Error per coordinate is ``|analytic - fd| / max(1, |fd|)``. ``coords``
    restricts the check to selected flat indices of ``x``; an integer picks
    that many evenly spaced indices.
    """
    x0 = x.data.copy()
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("gradcheck: non-finite forward value")
    tape.backward(out)
    analytic = leaf.grad.reshape(-1)
    if coords is None:
        idx = range(x0.size)
    elif isinstance(coords, int):
        idx = np.unique(np.linspace(0, x0.size - 1, coords).astype(int))
    else:
        idx = coords
    worst = 0.0
    flat = x0.reshape(-1)
    for i in idx:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"gradcheck: non-finite value at coordinate {i}")
        fd = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst
