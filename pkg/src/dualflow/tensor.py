"""Dense tensors with reverse-mode automatic differentiation.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to the parents' gradients.  Calling
:func:`backward` linearises the graph into a :class:`Tape` (topological
order) and walks it once in reverse.

Parameters and activations are float32; reductions accumulate in float64.
Any op producing a non-finite value raises :class:`NonFiniteError`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _check(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return data


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None, name: str | None = None,
                 _parents: tuple = (), _backward=None, op: str = "leaf"):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _infer_dtype(data))
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = _check(arr, op)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DTYPE


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad, dtype=dtype, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward, op) -> Tensor:
    req = any(p.requires_grad for p in parents)
    data = np.asarray(data)
    out = Tensor(data, dtype=data.dtype, op=op)
    if req:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(a.data[idx]), (a,), bw, "slice")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.dtype)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _node(out.astype(a.dtype), (a,), bw, "gelu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(out, (a,), lambda g: (g * inside,), "clip")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64).astype(a.dtype)
        return (out * (g - dot),)

    return _node(out, (a,), bw, "softmax")


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance (no affine part)."""
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = a.shape[-1]

    def bw(g):
        g64 = g.astype(np.float64)
        gx = inv / n * (n * g64 - g64.sum(-1, keepdims=True) - xhat * (g64 * xhat).sum(-1, keepdims=True))
        return (gx.astype(a.dtype),)

    return _node(xhat.astype(a.dtype), (a,), bw, "layernorm")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Topologically ordered record of the graph feeding one output."""

    nodes: list[Tensor]

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            s = state.get(key)
            if s == 2:
                continue
            if s == 1:
                raise TapeError("cycle in tape")
            state[key] = 1
            stack.append((node, True))
            for p in node._parents:
                ps = state.get(id(p))
                if ps == 1:
                    raise TapeError("cycle in tape")
                if ps is None and p.requires_grad:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray] | list[np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Fills ``.grad`` on every leaf that requires grad.  With ``wrt`` given,
    returns their gradients in order (zeros for tensors the loss does not
    depend on); otherwise returns ``{id(tensor): grad}`` for all leaves.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        tape = Tape.record(loss)
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None:
                continue
            if not node._parents:
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                k = id(parent)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = np.asarray(pg, dtype=parent.dtype)
    for k, leaf in leaves.items():
        leaf.grad = grads[k].astype(leaf.dtype).reshape(leaf.shape)
    if wrt is None:
        return {k: leaves[k].grad for k in leaves}
    out = []
    for t in wrt:
        g = grads.get(id(t)) if id(t) in leaves else None
        out.append(np.zeros_like(t.data) if g is None else t.grad)
    return out


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheck:
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, tol: float = 1e-4, h: float = 1e-3) -> GradCheck:
    """Compare autodiff against central differences at ``point``.

    ``fn`` maps a float64 tensor to a scalar tensor.  The relative error of
    each coordinate is ``|g_ad - g_fd| / (|g_fd| + 1e-8)``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    out = fn(x)
    (g_ad,) = backward(out, [x])
    again = fn(Tensor(x0.copy(), dtype=np.float64))
    if float(again.data) != float(out.data):
        raise RuntimeError("function is nondeterministic at the check point")

    flat = x0.ravel()
    g_fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(Tensor(flat.reshape(x0.shape).copy(), dtype=np.float64)).data)
        flat[i] = orig - h
        fm = float(fn(Tensor(flat.reshape(x0.shape).copy(), dtype=np.float64)).data)
        flat[i] = orig
        g_fd[i] = (fp - fm) / (2 * h)
    err = np.abs(g_ad.ravel() - g_fd) / (np.abs(g_fd) + 1e-8)
    return GradCheck(float(err.max()) if err.size else 0.0, tol)


def zeros(shape, requires_grad: bool = False, dtype=DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad)
