"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds an output :class:`Tensor` holding references to its parents and
a closure that maps the output gradient to parent gradients.  ``backward`` lays
the graph out as a :class:`Tape` (topological order) and walks it once in
reverse.  Gradients accumulate with ``+=`` so tensors used more than once (the
residual stream, shared weights) receive the sum of their contributions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

# Multiply-accumulate counter used by the instrumented FLOPs oracle.
_mac_counter: Optional[list] = None


class DimensionError(ValueError):
    pass


class ArgumentError(ValueError):
    pass


class MaskError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _count_macs(n: int) -> None:
    if _mac_counter is not None:
        _mac_counter[0] += int(n)


class count_macs:
    """Context manager that tallies multiply-accumulates of matmul-type ops."""

    def __enter__(self):
        global _mac_counter
        self._prev = _mac_counter
        _mac_counter = [0]
        self._box = _mac_counter
        return self

    @property
    def total(self) -> int:
        return self._box[0]

    def __exit__(self, *exc):
        global _mac_counter
        _mac_counter = self._prev
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> "Tape":
        tape = Tape.build(self)
        tape.run(self, grad)
        return tape

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    node: Tensor
    inputs: tuple


@dataclass
class Tape:
    """Recorded ops in topological order (inputs always precede outputs)."""

    ops: list = field(default_factory=list)

    @classmethod
    def build(cls, root: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        # iterative DFS; children visited left to right so the order is fixed
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
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        tape = cls()
        for node in order:
            if node._backward is not None:
                tape.ops.append(TapeEntry(node, node._parents))
        return tape

    def run(self, root: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if root.size != 1:
                raise ArgumentError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(root.data)
        root._accumulate(np.asarray(grad, dtype=DTYPE))
        for entry in reversed(self.ops):
            node = entry.node
            if node.grad is None:
                continue
            node._backward(node.grad)


def _needs_grad(*ts) -> bool:
    return any(isinstance(t, Tensor) and t.requires_grad for t in ts)


def _make(data, parents: tuple, backward: Callable, op: str) -> Tensor:
    req = _needs_grad(*parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), _backward=backward if req else None, op=op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data.copy(), requires_grad=False, op="detach")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    x2 = xd * xd
    inner = c * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        x._accumulate(g * d)

    return _make(out, (x,), backward, "gelu")


# ------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:  # a view: no repeated positions
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        x._accumulate(full)

    return _make(x.data[idx], (x,), backward, "getitem")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        x._accumulate(_unbroadcast(g, x.shape))

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), backward, "broadcast_to")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick rows along axis -2 per batch element: ``x[b, index[b], :]``.

    ``x`` is (B, n, d) and ``index`` is (B, k) integer.
    """
    index = np.asarray(index)
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows expects (B,n,d) and (B,k); got {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise ArgumentError("gather_rows index out of range")
    bidx = np.arange(x.shape[0])[:, None]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (bidx, index), g)
        x._accumulate(full)

    return _make(x.data[bidx, index], (x,), backward, "gather_rows")


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading dims; ``b`` may be 2-D (shared)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _count_macs(out.size * a.shape[-1])

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None, active: Optional[int] = None) -> Tensor:
    """``x @ w.T + b`` with torch weight layout ``w: (out, in)``.

    ``active`` is the number of live weights, used only for MAC accounting
    (ideal sparse matmul); defaults to all of ``w``.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    out = x.data @ w.data.T
    rows = out.size // w.shape[0] if w.shape[0] else 0
    _count_macs(rows * (w.size if active is None else active))
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            w._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return _make(out, parents, backward, "linear")


def masked_weight(w: Tensor, m) -> Tensor:
    """Effective weight ``w * m``.

    The returned node's ``.grad`` after backward is the dense gradient of the
    loss w.r.t. the effective weight (used by grow criteria); ``w.grad`` only
    receives the masked part.
    """
    m_arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=DTYPE)
    if m_arr.shape != w.shape:
        raise DimensionError(f"mask shape {m_arr.shape} != weight shape {w.shape}")
    if not np.all((m_arr == 0) | (m_arr == 1)):
        raise MaskError("mask entries must be 0 or 1")

    def backward(g):
        w._accumulate(g * m_arr)

    out = _make(w.data * m_arr, (w,), backward, "masked_weight")
    return out


# ---------------------------------------------------------------- nonlinear


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"softmax axis {axis} invalid for ndim {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dx = rstd * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)

    return _make(out, (x, gamma, beta), backward, "layernorm")


def cross_entropy_label_smoothed(logits: Tensor, target, eps: float = 0.1) -> Tensor:
    """Mean label-smoothed cross entropy over the batch.

    The smoothed target puts ``1 - eps`` on the true class and spreads ``eps``
    uniformly over all classes.
    """
    target = np.asarray(target, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or target.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross entropy expects (B,C) logits and (B,) targets; got {logits.shape}, {target.shape}")
    B, C = logits.shape
    if target.size and (target.min() < 0 or target.max() >= C):
        raise ArgumentError("target class out of range")
    if not 0.0 <= eps < 1.0:
        raise ArgumentError("label smoothing must be in [0, 1)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full((B, C), eps / C)
    q[np.arange(B), target] += 1.0 - eps
    loss = -(q * logp).sum() / B
    if not np.isfinite(loss):
        raise NonFiniteError("cross entropy is not finite")

    def backward(g):
        p = np.exp(logp)
        logits._accumulate(g * (p - q) / B)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Value of ``hard``, gradient of ``soft``.

    Same thing as ``hard - detach(soft) + soft`` but the forward value is
    exactly ``hard`` rather than equal up to rounding.
    """
    hard = np.asarray(hard, dtype=DTYPE)
    if hard.shape != soft.shape:
        raise DimensionError("straight_through: shapes differ")

    def backward(g):
        soft._accumulate(g)

    return _make(hard.copy(), (soft,), backward, "straight_through")


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)
