"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape`; outside a tape they simply compute values. Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mse(matmul(x, w), y)
    tape.backward(loss)
    w.grad  # d loss / d w
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


class NumericalError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        if self._consumed:
            raise RuntimeError("tape already consumed by backward(); call reset() first")
        self._records.append((out, parents, backward))

    def reset(self) -> None:
        self._records.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every leaf tensor that requires a gradient.

        Leaf gradients accumulate into any existing ``.grad``.
        """
        if self._consumed:
            raise RuntimeError("backward() called twice on the same tape without reset()")
        if loss.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        self._consumed = True
        produced = {id(out) for out, _, _ in self._records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in produced:
                    leaves[key] = p
        for key, leaf in leaves.items():
            g = grads[key]
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {leaf!r}")
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _make(value: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    # a sum over any NaN/Inf is non-finite; cheaper than an elementwise mask
    if not np.isfinite(value.sum()):
        raise NumericalError(f"non-finite output in {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(out, tuple(parents), backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Batched matrix product of operands with ndim >= 2 (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    if b.ndim == 2:
        # right-multiplication by a weight matrix: fold batch dims into one GEMM
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), backward, "matmul")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def _shift(h: np.ndarray, z: np.ndarray) -> np.ndarray:
    # h: G + (N, N); z: G + S + (N, F) -> one (N, N) @ (N, S*F) GEMM per graph
    gdims = h.shape[:-2]
    n, f = z.shape[-2:]
    pg = int(np.prod(gdims, dtype=np.int64))
    zr = z.reshape(pg, -1, n, f).transpose(0, 2, 1, 3).reshape(pg, n, -1)
    out = h.reshape(pg, n, n) @ zr
    return out.reshape(pg, n, -1, f).transpose(0, 2, 1, 3).reshape(z.shape)


def graph_shift(h, z) -> Tensor:
    """``H @ Z`` over the node axis; ``h``'s batch dims must prefix ``z``'s.

    ``h`` has shape ``G + (N, N)``; ``z`` has shape ``G + S + (N, F)``.
    """
    h, z = as_tensor(h), as_tensor(z)
    gdims = h.shape[:-2]
    n = h.shape[-1]
    if h.shape[-2] != n or z.ndim < 2 or z.shape[-2] != n or z.shape[: len(gdims)] != gdims:
        raise ValueError(f"graph_shift shape mismatch {h.shape} vs {z.shape}")

    def backward(g):
        gz = _shift(np.swapaxes(h.data, -1, -2), g) if z.requires_grad else None
        gh = None
        if h.requires_grad:
            pg = int(np.prod(gdims, dtype=np.int64))
            f = z.shape[-1]
            gr = g.reshape(pg, -1, n, f).transpose(0, 2, 1, 3).reshape(pg, n, -1)
            zr = z.data.reshape(pg, -1, n, f).transpose(0, 2, 1, 3).reshape(pg, n, -1)
            gh = (gr @ np.swapaxes(zr, -1, -2)).reshape(h.shape)
        return gh, gz

    return _make(_shift(h.data, z.data), (h, z), backward, "graph_shift")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * sig

    def backward(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _make(out, (a,), backward, "silu")


ACTIVATIONS = {"relu": relu, "silu": silu}


def layer_normalize(z, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then apply per-feature ``gain`` and ``bias``."""
    z, gain, bias = as_tensor(z), as_tensor(gain), as_tensor(bias)
    if gain.shape != z.shape[-1:] or bias.shape != z.shape[-1:]:
        raise ValueError("gain/bias must match the feature dimension")
    centered = z.data - z.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gz = None
        if z.requires_grad:
            dx = g * gain.data
            gz = inv * (dx - dx.mean(axis=-1, keepdims=True)
                        - xhat * (dx * xhat).mean(axis=-1, keepdims=True))
        return gz, gg, gb

    return _make(out, (z, gain, bias), backward, "layer_normalize")


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def mse(a, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")
