"""Dense-tensor numerical core with reverse-mode gradients.

A small define-by-run engine over numpy arrays: each operation records a
closure that routes the upstream gradient to its inputs, and
``Tensor.backward`` replays those closures in reverse topological order.
Float32 is the working precision; float64 is supported for
finite-difference oracle tests (cast parameters with ``astype``).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "StateError",
    "set_finite_checks",
    "concat",
    "maximum",
]


class StateError(RuntimeError):
    """Raised when backward is invoked without a recorded forward pass."""


_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Globally enable per-op finiteness asserts (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
    return np.ascontiguousarray(arr) if arr.ndim else arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float array (row-major) with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite values produced by tensor op")
        tracked = tuple(p for p in parents if p.requires_grad or p._parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if tracked:
            out._parents = tracked
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _const(self, value) -> np.ndarray:
        return np.asarray(value, dtype=self.data.dtype)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = a.data + b.data

        def backward(grad: np.ndarray) -> None:
            a._accumulate(_unbroadcast(grad, a.shape))
            b._accumulate(_unbroadcast(grad, b.shape))

        return Tensor._make(data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        a = self

        def backward(grad: np.ndarray) -> None:
            a._accumulate(-grad)

        return Tensor._make(-a.data, (a,), backward)

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = a.data * b.data

        def backward(grad: np.ndarray) -> None:
            a._accumulate(_unbroadcast(grad * b.data, a.shape))
            b._accumulate(_unbroadcast(grad * a.data, b.shape))

        return Tensor._make(data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = a.data / b.data

        def backward(grad: np.ndarray) -> None:
            a._accumulate(_unbroadcast(grad / b.data, a.shape))
            b._accumulate(_unbroadcast(-grad * a.data / (b.data * b.data), b.shape))

        return Tensor._make(data, (a, b), backward)

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self
        c = float(exponent)
        data = a.data ** self._const(c)

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad * c * a.data ** self._const(c - 1.0))

        return Tensor._make(data, (a,), backward)

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        data = a.data @ b.data

        def backward(grad: np.ndarray) -> None:
            a._accumulate(_unbroadcast(grad @ b.data.swapaxes(-1, -2), a.shape))
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ grad, b.shape))

        return Tensor._make(data, (a, b), backward)

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad.reshape(old))

        return Tensor._make(a.data.reshape(shape), (a,), backward)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        a = self

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad.swapaxes(ax1, ax2))

        return Tensor._make(np.ascontiguousarray(a.data.swapaxes(ax1, ax2)), (a,), backward)

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def backward(grad: np.ndarray) -> None:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, grad)
            a._accumulate(full)

        data = np.asarray(a.data[idx])
        if data.ndim:
            data = np.ascontiguousarray(data)
        return Tensor._make(data, (a,), backward)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(grad: np.ndarray) -> None:
            g = grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False))

        return Tensor._make(np.asarray(data), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[ax] for ax in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise nonlinearities --------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        data = np.exp(a.data)

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad * data)

        return Tensor._make(data, (a,), backward)

    def log(self) -> "Tensor":
        a = self

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad / a.data)

        return Tensor._make(np.log(a.data), (a,), backward)

    def sqrt(self) -> "Tensor":
        a = self
        data = np.sqrt(a.data)

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad * self._const(0.5) / data)

        return Tensor._make(data, (a,), backward)

    def gelu(self) -> "Tensor":
        """Exact (erf-based) GELU."""
        a = self
        x = a.data
        cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0))).astype(x.dtype, copy=False)
        data = x * cdf

        def backward(grad: np.ndarray) -> None:
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            a._accumulate(grad * (cdf + x * pdf).astype(x.dtype, copy=False))

        return Tensor._make(data, (a,), backward)

    def clamp_min(self, floor: float) -> "Tensor":
        """max(x, floor); at exact ties the gradient passes through to x."""
        a = self
        mask = a.data >= floor
        data = np.where(mask, a.data, self._const(floor))

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad * mask.astype(a.data.dtype))

        return Tensor._make(data.astype(a.data.dtype, copy=False), (a,), backward)

    # -- fused ops for the transformer hot path ------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(grad: np.ndarray) -> None:
            inner = (grad * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (grad - inner))

        return Tensor._make(data, (a,), backward)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        data = shifted - logsumexp
        probs = np.exp(data)

        def backward(grad: np.ndarray) -> None:
            a._accumulate(grad - probs * grad.sum(axis=axis, keepdims=True))

        return Tensor._make(data, (a,), backward)

    def layer_norm(self, eps: float = 1e-6) -> "Tensor":
        """Normalize the last axis to zero mean / unit variance (no affine)."""
        a = self
        x = a.data
        n = x.shape[-1]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
        data = xc * inv

        def backward(grad: np.ndarray) -> None:
            gsum = grad.sum(axis=-1, keepdims=True)
            gysum = (grad * data).sum(axis=-1, keepdims=True)
            a._accumulate((inv / n) * (n * grad - gsum - data * gysum))

        return Tensor._make(data.astype(x.dtype, copy=False), (a,), backward)

    # -- autograd ----------------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if not (self.requires_grad or self._parents):
            return
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) tensor through the recorded graph."""
        if self._backward is None and not self._parents:
            raise StateError("backward() called on a leaf: no forward computation was recorded")
        if self.size != 1:
            raise ValueError("backward() expects a scalar loss")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # interior activations: free the gradient once consumed
                if node._parents and node is not self:
                    node.grad = None


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to the inputs."""
    parts = list(tensors)
    data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(grad: np.ndarray) -> None:
        moved = np.moveaxis(grad, axis, 0)
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            part._accumulate(np.ascontiguousarray(
                np.moveaxis(moved[start:stop], 0, axis)))

    return Tensor._make(data, parts, backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on exact ties the gradient routes to ``a``."""
    data = np.maximum(a.data, b.data)
    take_a = a.data >= b.data

    def backward(grad: np.ndarray) -> None:
        a._accumulate(_unbroadcast(grad * take_a, a.shape))
        b._accumulate(_unbroadcast(grad * ~take_a, b.shape))

    return Tensor._make(data, (a, b), backward)
