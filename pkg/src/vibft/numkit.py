"""Dense float64 tensors with reverse-mode differentiation and seeded randomness.

Every ``Tensor`` records the operation that produced it, so calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into the leaves.  Only the handful of
primitives needed by small MLPs and the bottleneck objective are provided.

Randomness comes from :class:`Rng`, which draws uniforms from numpy's PCG64
bit generator and turns them into normals with the Box-Muller transform.
Both pieces are fully specified algorithms, so a seed reproduces the same
stream on any platform.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NumkitError(Exception):
    """Base class for errors raised by the tensor layer."""


class DimensionError(NumkitError, ValueError):
    pass


class NonFiniteError(NumkitError, ArithmeticError):
    pass


class ContractError(NumkitError, ValueError):
    """A precondition of an operation was violated by the caller."""


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {what}")


class Tensor:
    """A float64 array that optionally participates in the gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    # Operator sugar; the named functions below do the work.
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    live = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    if live:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` in the overflow-free form ``max(x, 0) + log1p(exp(-|x|))``."""
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, g * _sigmoid(x.data))

    return _result(_softplus(x.data), (x,), backward, "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _result(out, (x,), backward, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NonFiniteError("log: argument must be strictly positive")

    def backward(g):
        _accumulate(x, g / x.data)

    return _result(np.log(x.data), (x,), backward, "log")


def square(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, 2.0 * g * x.data)

    return _result(x.data * x.data, (x,), backward, "square")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(np.asarray(x.data.sum(axis=axis), dtype=np.float64), (x,), backward, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of a ``B x C`` array (no gradient tracking)."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    return np.exp(log_softmax(data))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be B x C, got {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"softmax_cross_entropy: {b} logit rows but labels shape {labels.shape}")
    if b and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    logp = log_softmax(logits.data)
    rows = np.arange(b)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        _accumulate(logits, g * grad / b)

    loss = -logp[rows, labels].mean()
    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Returns a gradient per entry of ``params``; parameters that do not
    influence the loss get an exact zero array of their own shape.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params:
        for p in params.values():
            p.grad = None
    order = _topological_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads = {}
    for name, p in (params or {}).items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        grads[name] = g
    return grads


class Rng:
    """Seeded random stream: PCG64 uniforms, Box-Muller normals.

    Child streams from :meth:`spawn` are keyed by name, so adding a new
    consumer of randomness does not shift any existing stream.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def spawn(self, name: str) -> Rng:
        return Rng(self.seed, (*self.key, zlib.crc32(name.encode())))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape)

    def uniform_range(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.uniform(shape)

    def gaussian(self, shape=()) -> np.ndarray:
        shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        u1 = 1.0 - self.uniform(pairs)  # (0, 1]: keeps log finite
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * math.pi * u2
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return z.reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(0, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self.uniform(shape) < p


def gaussian(rng: Rng, shape) -> Tensor:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    return Tensor(rng.gaussian(shape))


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    step: float
    tolerance: float
    numeric: dict[str, np.ndarray] = field(default_factory=dict)
    analytic: dict[str, np.ndarray] = field(default_factory=dict)
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.abs(a - b) / denom


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    analytic: Mapping[str, np.ndarray] | None = None,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``f(params)`` against central differences.

    ``analytic`` may be supplied to check externally computed gradients
    (the negative-control tests pass deliberately corrupted ones).
    """
    if not step > 0:
        raise ContractError("finite difference step must be positive")
    if analytic is None:
        analytic = backward(f(params), params)
    report = GradCheckReport(step=step, tolerance=tolerance)
    for name in names if names is not None else params:
        p = params[name]
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + step
                up = f(params).item()
                flat[i] = orig - step
                down = f(params).item()
            except NonFiniteError as exc:
                raise NonFiniteError(f"non-finite loss while perturbing {name}[{i}]") from exc
            finally:
                flat[i] = orig
            numeric[i] = (up - down) / (2.0 * step)
        numeric = numeric.reshape(p.shape)
        report.numeric[name] = numeric
        report.analytic[name] = np.asarray(analytic[name])
        report.max_rel_error[name] = float(relative_error(report.analytic[name], numeric).max(initial=0.0))
    return report
