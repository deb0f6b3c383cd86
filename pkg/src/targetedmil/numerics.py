"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tensor` wraps a numpy array and records the operation that produced
it.  :func:`backward` walks the recorded graph in reverse topological order and
assigns ``grad`` on every leaf tensor that requires a gradient.  The op set is
deliberately small: it covers fully connected networks, Gaussian densities and
the max-pooling used by multi-instance losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GradCheckError(ValueError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: Callable[[np.ndarray], tuple] | None = None,
        op: str = "leaf",
    ):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        # constants never need their history
        self._parents = parents if self.requires_grad else ()
        self._backward = backward_fn if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, parents=(a, b), backward_fn=bw, op="add")


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), backward_fn=lambda g: (-g,), op="neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, parents=(a, b), backward_fn=bw, op="mul")


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (numpy ``@`` semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ValueError("matmul supports only 1-D and 2-D operands")
    A, B = a.data, b.data

    def bw(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 1 and B.ndim == 2:
            return B @ g, np.outer(A, g)
        if A.ndim == 2 and B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g * B, g * A

    return Tensor(A @ B, parents=(a, b), backward_fn=bw, op="matmul")


def _logistic(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _logistic(a.data)
    return Tensor(s, parents=(a,), backward_fn=lambda g: (g * s * (1.0 - s),), op="sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return Tensor(
        np.logaddexp(0.0, x), parents=(a,), backward_fn=lambda g: (g * _logistic(x),), op="softplus"
    )


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return Tensor(e, parents=(a,), backward_fn=lambda g: (g * e,), op="exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return Tensor(out, parents=(a,), backward_fn=lambda g: (g / x,), op="log")


def square(a: Tensor) -> Tensor:
    x = a.data
    return Tensor(x * x, parents=(a,), backward_fn=lambda g: (2.0 * g * x,), op="square")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero wherever the clamp is active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return Tensor(np.clip(x, lo, hi), parents=(a,), backward_fn=lambda g: (g * inside,), op="clip")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis), parents=(a,), backward_fn=bw, op="sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def max_with_index(a: Tensor) -> tuple[Tensor, int]:
    """Maximum of a 1-D tensor and its position.

    Ties go to the lowest index, and only that element receives gradient.
    """
    if a.data.ndim != 1 or a.size == 0:
        raise ValueError("max_with_index expects a nonempty 1-D tensor")
    idx = int(np.argmax(a.data))
    n = a.size

    def bw(g):
        out = np.zeros(n)
        out[idx] = g
        return (out,)

    return Tensor(a.data[idx], parents=(a,), backward_fn=bw, op="max"), idx


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        parents=tuple(tensors),
        backward_fn=bw,
        op="concat",
    )


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return Tensor(
        np.broadcast_to(a.data, shape).copy(),
        parents=(a,),
        backward_fn=lambda g: (_unbroadcast(g, src),),
        op="broadcast",
    )


def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Assign ``grad`` = d(loss)/d(leaf) on every reachable leaf.

    Every tensor in ``params`` starts from a zero gradient, so parameters the
    loss does not touch end up with ``grad`` all zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for p in params:
        p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            _check_finite(pg, f"{node.op} (backward)")
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: tuple[int, int] | None = None  # (param index, flat coordinate)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` rebuilds the scalar loss from the current values of ``params``.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not h > 0:
        raise GradCheckError(f"finite-difference step must be positive, got {h}")
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("loss is not finite at the base point")
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    worst, worst_at = 0.0, None
    for k, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
            except NonFiniteError as exc:
                raise GradCheckError(f"loss not finite at probe ({k}, {i})") from exc
            finally:
                flat[i] = orig
            num = (up - down) / (2.0 * h)
            a = analytic[k].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if err > worst:
                worst, worst_at = err, (k, i)
    return GradCheckReport(worst, worst <= tol, worst_at)


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def optimizer_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState
) -> OptimizerState:
    """One bias-corrected adaptive-moment update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


class Adam:
    """Convenience wrapper stepping a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **hyper):
        self.params = list(params)
        self.state = OptimizerState(learning_rate=lr, **hyper)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        optimizer_step([p.data for p in self.params], grads, self.state)
