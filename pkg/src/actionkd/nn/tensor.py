"""Reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray plus gradient plumbing: every op records its
parents and a closure that scatters the output gradient back to them.
``backward()`` walks the tape in reverse topological order. Everything is
computed in 64-bit floats; determinism is bit-exact for a fixed op order.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """float64 array with an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A constant view of this tensor's value, cut off from the tape."""
        return Tensor(self.data)

    # -- graph machinery ----------------------------------------------------

    @staticmethod
    def _node(data: Array, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def _accumulate(self, g: Array) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out_data = self.data + other.data

        def back(g: Array) -> None:
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor._node(out_data, (self, other), back)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out_data = self.data * other.data

        def back(g: Array) -> None:
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor._node(out_data, (self, other), back)

    __rmul__ = __mul__

    def __sub__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out_data = self.data - other.data

        def back(g: Array) -> None:
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(-g, other.data.shape))

        return Tensor._node(out_data, (self, other), back)

    def __rsub__(self, other) -> "Tensor":
        return ensure_tensor(other).__sub__(self)

    def __neg__(self) -> "Tensor":
        def back(g: Array) -> None:
            self._accumulate(-g)

        return Tensor._node(-self.data, (self,), back)

    def __truediv__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        out_data = self.data / other.data

        def back(g: Array) -> None:
            self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            other._accumulate(
                _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
            )

        return Tensor._node(out_data, (self, other), back)

    def __rtruediv__(self, other) -> "Tensor":
        return ensure_tensor(other).__truediv__(self)

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data**exponent

        def back(g: Array) -> None:
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._node(out_data, (self,), back)

    def __matmul__(self, other) -> "Tensor":
        other = ensure_tensor(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")
        out_data = self.data @ other.data

        def back(g: Array) -> None:
            self._accumulate(
                _unbroadcast(g @ other.data.swapaxes(-1, -2), self.data.shape)
            )
            other._accumulate(
                _unbroadcast(self.data.swapaxes(-1, -2) @ g, other.data.shape)
            )

        return Tensor._node(out_data, (self, other), back)

    # -- elementwise functions ------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def back(g: Array) -> None:
            self._accumulate(g * out_data)

        return Tensor._node(out_data, (self,), back)

    def log(self) -> "Tensor":
        def back(g: Array) -> None:
            self._accumulate(g / self.data)

        return Tensor._node(np.log(self.data), (self,), back)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def back(g: Array) -> None:
            self._accumulate(g * 0.5 / out_data)

        return Tensor._node(out_data, (self,), back)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def back(g: Array) -> None:
            self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor._node(out_data, (self,), back)

    def relu(self) -> "Tensor":
        keep = self.data > 0

        def back(g: Array) -> None:
            self._accumulate(g * keep)

        return Tensor._node(np.where(keep, self.data, 0.0), (self,), back)

    # -- reductions / shape ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g: Array) -> None:
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape).copy())

        return Tensor._node(out_data, (self,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def back(g: Array) -> None:
            self._accumulate(g.reshape(self.data.shape))

        return Tensor._node(out_data, (self,), back)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(np.argsort(axes))

        def back(g: Array) -> None:
            self._accumulate(g.transpose(inverse))

        return Tensor._node(self.data.transpose(axes), (self,), back)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        def back(g: Array) -> None:
            self._accumulate(g.swapaxes(a, b))

        return Tensor._node(self.data.swapaxes(a, b), (self,), back)

    def __getitem__(self, index) -> "Tensor":
        out_data = self.data[index]

        def back(g: Array) -> None:
            if not self.requires_grad:
                return
            scatter = np.zeros_like(self.data)
            np.add.at(scatter, index, g)
            self._accumulate(scatter)

        return Tensor._node(out_data, (self,), back)


def ensure_tensor(value) -> Tensor:
    """Wrap scalars/arrays as constant Tensors; pass Tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(values, name: str, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Create a trainable leaf tensor.

    `values` is either an explicit array or a shape tuple; for a shape,
    entries are drawn N(0, scale) from `rng` (scale defaults to 1/sqrt(fan_in)).
    """
    if isinstance(values, tuple):
        if rng is None:
            raise ValueError("rng required when initializing from a shape")
        if scale is None:
            fan_in = values[0] if len(values) > 1 else values[-1]
            scale = 1.0 / np.sqrt(max(fan_in, 1))
        values = rng.normal(0.0, scale, size=values)
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def collect_grads(params: Iterable[Tensor]) -> dict[str, Array]:
    """Snapshot current gradients by parameter name (zeros when unset)."""
    out = {}
    for p in params:
        out[p.name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
    return out
