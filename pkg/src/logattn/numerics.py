"""Dense tensors with reverse-mode differentiation, plus the ADAM optimizer.

Every op takes and returns :class:`Tensor`. When gradient recording is on and
any input requires a gradient, the output remembers its parents and a closure
mapping the output adjoint to the parent adjoints. :func:`backward` walks that
graph in reverse topological order.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


_mode = threading.local()


def grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _mode.enabled = False
        return self

    def __exit__(self, *exc):
        _mode.enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn, "mul")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), backward_fn, "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form: overflow-free for large |x| and exactly 0.5 at 0
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), backward_fn, "sigmoid")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true and ``b`` elsewhere (mask is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast(a, b, "where")

    def backward_fn(g):
        return (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                _unbroadcast(np.where(mask, 0.0, g), b.shape))

    return _result(np.where(mask, a.data, b.data), (a, b), backward_fn, "where")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat of nothing")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tensors, backward_fn, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("stack of nothing")
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {[t.shape for t in tensors]}") from exc

    def backward_fn(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(data, tensors, backward_fn, "stack")


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)

    def backward_fn(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(data, copy=True), (a,), backward_fn, "index")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def take(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is any integer array."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table of {table.shape[0]} rows")

    def backward_fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.data[ids], (table,), backward_fn, "take")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward_fn, "reshape")


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn, "sum")


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)

    def backward_fn(g):
        return (_unbroadcast(g, a.shape),)

    return _result(np.broadcast_to(a.data, shape).copy(), (a,), backward_fn, "broadcast")


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


# ------------------------------------------------------------- distributions


def _softmax_data(x: np.ndarray, axis: int, mask=None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction. Masked-out entries get weight exactly 0."""
    a = as_tensor(a)
    if a.data.size == 0 or a.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if not mask.any(axis=axis).all():
            raise DimensionError("softmax mask hides every entry of some row")
    y = _softmax_data(a.data, axis, mask)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward_fn, "softmax")


def log_softmax_data(x: np.ndarray) -> np.ndarray:
    """Plain-array log softmax over the last axis."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target, mask=None) -> Tensor:
    """Summed ``-log softmax(logits)[target]`` over every unmasked row.

    ``logits`` has shape ``(..., n)`` and ``target`` the leading shape. A
    scalar target with a vector of logits gives the single-token loss.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    n = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {target.shape} vs logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= n):
        raise IndexError(f"target out of range [0, {n})")
    weight = np.ones(target.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    logp = log_softmax_data(logits.data)
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    loss = -(picked * weight).sum()

    def backward_fn(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None],
                          np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * weight[..., None],)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn, "cross_entropy")


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: tanh, sigmoid, add, mul, concat."""
    if kind == "concat":
        return concat(args, axis=-1)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# ------------------------------------------------------------------ backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, inputs before consumers."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Adjoints of ``loss`` with respect to every leaf that requires a gradient.

    Gradients are recomputed from scratch on each call and also stored on
    ``leaf.grad``; calling twice gives identical results.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.backward_fn is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# -------------------------------------------------------------- init and ADAM


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape).astype(dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float = 5.0):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected ADAM update, applied to ``params`` in place.

    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"{name}: grad {g.shape} vs param {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; update rejected")

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
