"""A small reverse-mode gradient engine over numpy arrays, MLPs and Adam.

Every :class:`Tensor` wraps a float64 array and remembers the tensors it was
computed from together with a closure that pushes its gradient back to them.
Calling :meth:`Tensor.backward` on a scalar walks that graph in reverse
topological order.  Only the operations the flow needs are provided; there are
no higher-order derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation

SOFTPLUS_INV_ONE = math.log(math.e - 1.0)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undoing numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents)

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:  # leaf
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- elementwise arithmetic -------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        return Tensor(self.data + other.data, parents=(self, other), backward=lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        return Tensor(self.data - other.data, parents=(self, other), backward=lambda g: (g, -g))

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        return Tensor(-self.data, parents=(self,), backward=lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(a * b, parents=(self, other), backward=lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor(out, parents=(self, other), backward=lambda g: (g / b, -g * out / b))

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor(a**exponent, parents=(self,), backward=lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ContractViolation("matmul is defined for 2-D operands only")
        return Tensor(a @ b, parents=(self, other), backward=lambda g: (g @ b.T, a.T @ g))

    def __getitem__(self, index) -> "Tensor":
        # basic indexing only: slices never repeat an element
        shape = self.data.shape

        def backward(g):
            full = np.zeros(shape)
            full[index] = g
            return (full,)

        return Tensor(self.data[index], parents=(self,), backward=backward)

    # -- reductions ---------------------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), parents=(self,), backward=backward)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.data.size)

    def cumsum(self, axis: int = -1) -> "Tensor":
        def backward(g):
            return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

        return Tensor(np.cumsum(self.data, axis=axis), parents=(self,), backward=backward)

    # -- nonlinearities -----------------------------------------------------
    def relu(self) -> "Tensor":
        mask = self.data > 0  # subgradient 0 at the kink
        return Tensor(self.data * mask, parents=(self,), backward=lambda g: (g * mask,))

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor(out, parents=(self,), backward=lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor(np.log(a), parents=(self,), backward=lambda g: (g / a,))

    def softplus(self) -> "Tensor":
        a = self.data
        out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
        return Tensor(out, parents=(self,), backward=lambda g: (g * _sigmoid(a),))

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor(out, parents=(self,), backward=backward)

    def take_along(self, indices: np.ndarray, axis: int = -1) -> "Tensor":
        """Gather like :func:`numpy.take_along_axis`; indices are constants."""
        shape = self.data.shape

        def backward(g):
            full = np.zeros(shape)
            idx = list(np.indices(indices.shape, sparse=True))
            idx[axis % len(shape)] = indices
            np.add.at(full, tuple(idx), g)
            return (full,)

        return Tensor(np.take_along_axis(self.data, indices, axis=axis), parents=(self,), backward=backward)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), parents=tuple(tensors), backward=backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor, relu: bool = False) -> Tensor:
    """Fused ``x @ weight + bias`` with optional ReLU; one graph node instead of three."""
    xd, wd = x.data, weight.data
    out = xd @ wd
    out += bias.data
    if relu:
        np.maximum(out, 0.0, out=out)

    def backward(g):
        if relu:
            g = g * (out > 0)
        gx = g @ wd.T if x.requires_grad else None
        return gx, xd.T @ g, np.ones(len(g)) @ g  # faster than g.sum(axis=0)

    return Tensor(out, parents=(x, weight, bias), backward=backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor(
        np.where(mask, a.data, b.data),
        parents=(a, b),
        backward=lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)),
    )


# -- MLP ---------------------------------------------------------------------


@dataclass
class MlpParams:
    """Fully connected ReLU network; ``weights[l]`` has shape ``(in, out)``."""

    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ContractViolation("number of weight/bias arrays does not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[l], self.layer_sizes[l + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ContractViolation(f"layer {l}: weight {w.shape} / bias {b.shape}, expected {expected}")

    @property
    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(
    layer_sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = True
) -> MlpParams:
    """Uniform He initialization for hidden layers; the output layer starts at zero."""
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for l in range(n_layers):
        fan_in, fan_out = layer_sizes[l], layer_sizes[l + 1]
        if l == n_layers - 1 and zero_last:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = math.sqrt(6.0 / max(fan_in, 1))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(list(layer_sizes), weights, biases)


def mlp_forward(params: MlpParams, inputs: np.ndarray) -> np.ndarray:
    """Plain numpy evaluation (no graph). ``inputs`` is ``(n, in)`` or ``(in,)``."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[-1] != params.layer_sizes[0]:
        raise ContractViolation(f"MLP expects {params.layer_sizes[0]} inputs, got {x.shape[-1]}")
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = x @ w + b
        if l < last:
            x = np.maximum(x, 0.0)
    return x


def mlp_forward_tensor(params: Sequence[Tensor], inputs: Tensor) -> Tensor:
    """Graph-recording evaluation. ``params`` alternates weight, bias tensors."""
    x = inputs
    n_layers = len(params) // 2
    for l in range(n_layers):
        x = linear(x, params[2 * l], params[2 * l + 1], relu=l < n_layers - 1)
    return x


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: Iterable[np.ndarray | None], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update, applied in place. Returns ``params``."""
    grads = list(grads)
    if len(grads) != len(params):
        raise ContractViolation("one gradient per parameter is required")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
