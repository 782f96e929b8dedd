"""Small reverse-mode autodiff over float64 numpy arrays.

Only the primitives needed by the distillation losses are provided; broadcasting
is limited to rank-2 operands (row vectors, column vectors and scalars against a
matrix).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from dmdlab.errors import ContractViolation, NumericFailure


class Tensor:
    """Dense array node in a computation tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "op")

    def __init__(self, value, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim > 2:
            raise ContractViolation(f"rank {self.value.ndim} tensors are not supported")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # tuple of (parent, fn mapping upstream grad -> grad wrt parent)
        self._parents = _parents
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.value.size != 1:
            raise ContractViolation(f"backward() needs a scalar, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, fn in node._parents:
                pg = fn(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _checked(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NumericFailure(f"non-finite value produced by primitive '{op}'", primitive=op)
    return value


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _node(value, op: str, parents: Iterable[tuple[Tensor, Callable]]) -> Tensor:
    value = _checked(value, op)
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    if not live:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, _parents=live, op=op)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value + b.value,
        "add",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value - b.value,
        "sub",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.value * b.value,
        "mul",
        [
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ],
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ContractViolation("matmul expects rank-2 operands")
    return _node(
        a.value @ b.value,
        "matmul",
        [(a, lambda g: g @ b.value.T), (b, lambda g: a.value.T @ g)],
    )


def affine(x, w, b) -> Tensor:
    """x @ w + b with b a row vector."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    return _node(
        x.value @ w.value + b.value,
        "affine",
        [
            (x, lambda g: g @ w.value.T),
            (w, lambda g: x.value.T @ g),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ],
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _node(y, "tanh", [(x, lambda g: g * (1.0 - y * y))])


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.value))  # overflow-free sigmoid
    return _node(x.value * s, "silu", [(x, lambda g: g * (s * (1.0 + x.value * (1.0 - s))))])


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.value * x.value, "square", [(x, lambda g: 2.0 * g * x.value)])


def clamp_min(x, lo: float = 0.0) -> Tensor:
    x = as_tensor(x)
    mask = x.value > lo
    return _node(np.where(mask, x.value, lo), "clamp_min", [(x, lambda g: g * mask)])


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    if axis is None:
        return _node(np.asarray(x.value.sum()), "sum", [(x, lambda g: np.broadcast_to(g, x.shape).copy())])
    out = x.value.sum(axis=axis, keepdims=True)
    return _node(out, "sum", [(x, lambda g: np.broadcast_to(g, x.shape).copy())])


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    if axis is None:
        return _node(np.asarray(x.value.mean()), "mean", [(x, lambda g: np.broadcast_to(g / n, x.shape).copy())])
    out = x.value.mean(axis=axis, keepdims=True)
    return _node(out, "mean", [(x, lambda g: np.broadcast_to(g / n, x.shape).copy())])


def stop_gradient(x) -> Tensor:
    """Identity forward, zero backward."""
    x = as_tensor(x)
    return Tensor(x.value, op="stop_gradient")


# --------------------------------------------------------------------------
# parameter vectors


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """All trainable arrays of one network, stored as a single flat float64 vector."""

    __slots__ = ("flat", "layout")

    def __init__(self, flat: np.ndarray, layout: tuple[LayoutEntry, ...]):
        flat = np.asarray(flat, dtype=np.float64)
        total = sum_sizes(layout)
        if flat.ndim != 1 or flat.size != total:
            raise ContractViolation(f"flat vector of size {flat.size} does not match layout size {total}")
        self.flat = flat
        self.layout = layout

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        layout = []
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(LayoutEntry(name, tuple(arr.shape), offset))
            offset += arr.size
        flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays.values()]) if arrays else np.zeros(0)
        return cls(flat, tuple(layout))

    def unflatten(self) -> dict[str, np.ndarray]:
        return {e.name: self.flat[e.offset : e.offset + e.size].reshape(e.shape) for e in self.layout}

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.unflatten().items()}

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(flat, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.layout)

    def __len__(self) -> int:
        return self.flat.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.flat, other.flat)

    def __repr__(self) -> str:
        return f"ParamVector(n={self.flat.size}, entries={[e.name for e in self.layout]})"


def sum_sizes(layout: Iterable[LayoutEntry]) -> int:
    return int(np.sum([e.size for e in layout], dtype=np.int64))


def _same_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise ContractViolation("parameter vectors have different layouts")


def param_distance(a: ParamVector, b: ParamVector) -> float:
    _same_layout(a, b)
    return float(np.linalg.norm(a.flat - b.flat))


def blend_params(target: ParamVector, source: ParamVector, lam: float) -> ParamVector:
    """Return lam * target + (1 - lam) * source."""
    _same_layout(target, source)
    if not (0.0 < lam <= 1.0):
        raise ContractViolation(f"blend weight must lie in (0, 1], got {lam}")
    return target.with_flat(lam * target.flat + (1.0 - lam) * source.flat)


def value_and_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor], at: ParamVector) -> tuple[float, ParamVector]:
    """Evaluate ``loss_fn`` once forward and once backward at ``at``.

    ``loss_fn`` receives a name -> Tensor mapping of fresh leaves.
    """
    if not np.isfinite(at.flat).all():
        raise ContractViolation("parameters must be finite")
    leaves = at.tensors(requires_grad=True)
    loss = loss_fn(leaves)
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise ContractViolation("loss function must return a scalar Tensor")
    loss.backward()
    parts = []
    for e in at.layout:
        g = leaves[e.name].grad
        parts.append(np.zeros(e.size) if g is None else g.ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    return loss.item(), at.with_flat(flat)


def grad(loss_fn: Callable[[dict[str, Tensor]], Tensor], at: ParamVector) -> ParamVector:
    return value_and_grad(loss_fn, at)[1]


class AdamW:
    """Decoupled weight decay Adam over a flat parameter vector."""

    def __init__(self, size: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: ParamVector, g: ParamVector) -> ParamVector:
        _same_layout(params, g)
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g.flat
        self.v = self.b2 * self.v + (1.0 - self.b2) * g.flat * g.flat
        mhat = self.m / (1.0 - self.b1**self.t)
        vhat = self.v / (1.0 - self.b2**self.t)
        flat = params.flat
        if self.weight_decay:
            flat = flat * (1.0 - self.lr * self.weight_decay)
        return params.with_flat(flat - self.lr * mhat / (np.sqrt(vhat) + self.eps))

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}
