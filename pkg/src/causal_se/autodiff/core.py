"""Dense tensors over numpy arrays with reverse-mode differentiation.

Every op records a closure mapping the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order,
accumulates gradients into leaves and then frees the graph.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import NonFiniteError, ShapeError


class _State(threading.local):
    # per-thread flags; class attributes are the defaults in every thread
    grad_enabled = True
    # Shape-stable kernels: every output element is accumulated in a fixed
    # order that does not depend on the extent of the other axes.
    stable = False
    tape: "ConstantTape | None" = None
    corrupt: str | None = None


_state = _State()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def detach(self):
        return detach(self)

    def backward(self, grad=None):
        run_backward(self, grad)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# context managers


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def stable_kernels():
    """Use shape-stable matmul and softmax normalization.

    BLAS GEMM picks different kernels (and summation orders) depending on the
    matrix extents, so row ``t`` of ``A[:t+1] @ W`` need not equal row ``t``
    of ``A @ W`` bit for bit.  Inside this context each dot product is
    accumulated sequentially along the contraction axis, which makes a row's
    value independent of how many other rows or trailing masked keys exist.
    Slow; intended for prefix evaluation and identity checks.
    """
    prev = _state.stable
    _state.stable = True
    try:
        yield
    finally:
        _state.stable = prev


class ConstantTape:
    """Records the values of non-differentiable constants during one forward.

    Replaying the tape during a later forward substitutes the recorded values,
    so ``detach`` outputs and argmin indices stay fixed under perturbation.
    This is what makes finite differences agree with straight-through and
    stop-gradient semantics.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replaying = False
        self.cursor = 0

    def _take(self, value: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(np.array(value, copy=True))
            return value
        if self.cursor >= len(self.values):
            raise RuntimeError("constant tape exhausted; forward pass differs from the recorded one")
        v = self.values[self.cursor]
        self.cursor += 1
        if v.shape != np.shape(value):
            raise RuntimeError("constant tape shape mismatch")
        return v.copy()


@contextlib.contextmanager
def record_constants():
    tape = ConstantTape()
    prev = _state.tape
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def replay_constants(tape: ConstantTape):
    prev = _state.tape
    tape.replaying = True
    tape.cursor = 0
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def corrupt_backward(op: str):
    """Fault injection: scale the input gradients of every ``op`` node by 1.5."""
    prev = _state.corrupt
    _state.corrupt = op
    try:
        yield
    finally:
        _state.corrupt = prev


def freeze(value: np.ndarray) -> np.ndarray:
    """Pass a non-differentiable array through the active constant tape."""
    if _state.tape is None:
        return value
    return _state.tape._take(value)


# ---------------------------------------------------------------------------
# backward engine


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def run_backward(root: Tensor, grad=None) -> None:
    if grad is None:
        if root.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            parent_grads = node._backward(g)
            scale = 1.5 if _state.corrupt == node.op else None
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if scale is not None:
                    pg = pg * scale
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # free the graph
        node._parents = ()
        node._backward = None
        node.requires_grad = False


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def log1p(x: Tensor) -> Tensor:
    return _result(np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),), "log1p")


def abs_(x: Tensor) -> Tensor:
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _result(out, (x,), lambda g: (g * (x.data > 0),), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * d,)

    return _result(out, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _expand_like(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(
        np.asarray(out), (x,), lambda g: (_expand_like(g, x.shape, axis, keepdims).copy(),), "sum"
    )


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)
    return _result(
        np.asarray(out), (x,), lambda g: (_expand_like(g / n, x.shape, axis, keepdims).copy(),), "mean"
    )


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    basic = _is_basic_index(idx)

    def backward(g):
        z = np.zeros_like(x.data)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result(np.array(out, copy=True), (x,), backward, "getitem")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward, "stack")


# ---------------------------------------------------------------------------
# matmul


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not _state.stable:
        return np.matmul(a, b)
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape, dtype=np.result_type(a, b))
    for k in range(a.shape[-1]):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _mm(a.data, b.data)

    def backward(g):
        ga = _mm(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = _mm(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# normalizations


def _row_sum(x: np.ndarray, axis: int) -> np.ndarray:
    if _state.stable:
        return np.take(np.cumsum(x, axis=axis), [-1], axis=axis)
    return np.sum(x, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (True = keep) zeroes excluded entries.

    Excluded entries behave as if their logit were -inf.
    """
    v = x.data
    if mask is not None:
        shifted_src = np.where(mask, v, -np.inf)
    else:
        shifted_src = v
    m = np.max(shifted_src, axis=axis, keepdims=True)
    e = np.exp(shifted_src - m)
    out = e / _row_sum(e, axis)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.data
    m = np.max(v, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    out = v - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * weight.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * weight.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, _unbroadcast(g * xhat, weight.shape), _unbroadcast(g, bias.shape)

    return _result(out, (x, weight, bias), backward, "layer_norm")


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    out = table.data[indices]

    def backward(g):
        z = np.zeros_like(table.data)
        np.add.at(z, indices.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (z,)

    return _result(out, (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# losses (mean-reduced)


def l1_loss(pred: Tensor, target) -> Tensor:
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    n = d.size

    def backward(g):
        s = g * np.sign(d) / n
        return s, -s

    return _result(np.asarray(np.abs(d).mean()), (pred, target), backward, "l1_loss")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _lift(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    n = d.size

    def backward(g):
        s = 2.0 * g * d / n
        return s, -s

    return _result(np.asarray((d * d).mean()), (pred, target), backward, "mse_loss")


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy shape mismatch: {logits.shape} vs targets {targets.shape}")
    v = logits.data
    m = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - m)
    z = np.sum(e, axis=-1, keepdims=True)
    logp = v - m - np.log(z)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    n = targets.size

    def backward(g):
        p = e / z
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p / n,)

    return _result(np.asarray(-picked.mean()), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# stop-gradient


def detach(x) -> Tensor:
    """Stop-gradient: the value passes, no gradient flows back."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(freeze(data))


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))
