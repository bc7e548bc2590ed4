"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array plus an optional gradient buffer.
Each operation records its inputs and a local backward rule on its output,
so the graph is rebuilt from scratch on every forward pass (define-by-run);
``backward`` then visits the recorded nodes exactly once in reverse
topological order.  Gradients accumulate additively, which makes tensors
reused on several paths come out right.

Broadcasting follows numpy; the backward side sums gradients over broadcast
dimensions.  Everything is float64: at the sizes this package targets the
precision is worth far more than the speed, and it is what makes tight
finite-difference tolerances achievable.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

Array = np.ndarray

# Lower clamp for log arguments; keeps the focal term finite as p_t -> 0.
LOG_FLOOR = 1e-12

_grad_enabled = True
_fault: dict = {"op": None, "scale": 1.0}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_backward_fault(op: str | None, scale: float = 1.01) -> None:
    """Test hook: scale the named op's input gradients by ``scale``.

    Lets fault-injection tests confirm that gradient checking localizes a
    corrupted backward rule.  Pass None to clear.
    """
    _fault["op"] = op
    _fault["scale"] = scale


class Tensor:
    """Row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_rule")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    # shape ops

    def reshape(self, *shape: int):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    def sum(self, axis: int | None = None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], rule: Callable[[], None] | None) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._rule = rule
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient over dimensions that were expanded by broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _acc(t: Tensor, g: Array, op: str) -> None:
    if _fault["op"] == op:
        g = g * _fault["scale"]
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad += g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from e
    out = _node(data, (a, b), None)

    def rule():
        if a.requires_grad:
            _acc(a, out.grad, "add")
        if b.requires_grad:
            _acc(b, out.grad, "add")

    out._rule = rule
    return out


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _node(-a.data, (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, -out.grad, "neg")

    out._rule = rule
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e
    out = _node(data, (a, b), None)

    def rule():
        if a.requires_grad:
            _acc(a, b.data * out.grad, "mul")
        if b.requires_grad:
            _acc(b, a.data * out.grad, "mul")

    out._rule = rule
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _node(a.data @ b.data, (a, b), None)

    def rule():
        if a.requires_grad:
            _acc(a, out.grad @ b.data.T, "matmul")
        if b.requires_grad:
            _acc(b, a.data.T @ out.grad, "matmul")

    out._rule = rule
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    out = _node(a.data.T.copy(), (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, out.grad.T, "transpose")

    out._rule = rule
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    out = _node(data, (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, out.grad.reshape(a.data.shape), "reshape")

    out._rule = rule
    return out


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing only (ints and slices); backward scatters into zeros."""
    a = _as_tensor(a)
    out = _node(a.data[key], (a,), None)

    def rule():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[key] += out.grad
            _acc(a, g, "getitem")

    out._rule = rule
    return out


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), None)

    def rule():
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.data.shape), "sum")

    out._rule = rule
    return out


def tmean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.tanh(a.data), (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, (1.0 - out.data * out.data) * out.grad, "tanh")

    out._rule = rule
    return out


def _sigmoid_stable(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _node(_sigmoid_stable(a.data), (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, out.data * (1.0 - out.data) * out.grad, "sigmoid")

    out._rule = rule
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.maximum(a.data, 0.0), (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, (a.data > 0.0) * out.grad, "relu")

    out._rule = rule
    return out


def log(a: Tensor) -> Tensor:
    """Natural log with the argument clamped to >= LOG_FLOOR.

    Below the floor the derivative is defined as 0 (the clamped branch is
    constant), which keeps backward finite for degenerate probabilities.
    """
    a = _as_tensor(a)
    clamped = np.maximum(a.data, LOG_FLOOR)
    out = _node(np.log(clamped), (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, np.where(a.data > LOG_FLOOR, 1.0 / clamped, 0.0) * out.grad, "log")

    out._rule = rule
    return out


def pow_const(a: Tensor, exponent: float) -> Tensor:
    """Elementwise x**c for a python-float exponent; subgradient 0 at kinks."""
    a = _as_tensor(a)
    c = float(exponent)
    out = _node(a.data**c, (a,), None)

    def rule():
        if a.requires_grad:
            if c == 0.0:
                return
            with np.errstate(divide="ignore", invalid="ignore"):
                d = c * a.data ** (c - 1.0)
            _acc(a, np.where(np.isfinite(d), d, 0.0) * out.grad, "pow")

    out._rule = rule
    return out


def softmax(a: Tensor, axis: int) -> Tensor:
    """Exponentials normalized along ``axis``, max-subtracted for stability."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (a,), None)

    def rule():
        if a.requires_grad:
            g = out.grad
            _acc(a, y * (g - (g * y).sum(axis=axis, keepdims=True)), "softmax")

    out._rule = rule
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(p.shape) for p in parts)
        ) from e
    out = _node(data, tuple(parts), None)
    sizes = [p.data.shape[axis] for p in parts]

    def rule():
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(offset, offset + n)
                _acc(p, out.grad[tuple(idx)], "concat")
            offset += n

    out._rule = rule
    return out


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Zero entries with probability ``rate`` and rescale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    a = _as_tensor(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("dropout in training mode requires an explicit rng")
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out = _node(a.data * keep, (a,), None)

    def rule():
        if a.requires_grad:
            _acc(a, keep * out.grad, "dropout")

    out._rule = rule
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar.  Gradients add onto whatever is already in the
    buffers, so callers zero parameter grads between steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: expected scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = {id(loss)}
    stack: list[tuple[Tensor, int]] = [(loss, 0)]
    while stack:
        node, i = stack[-1]
        if i < len(node._parents):
            stack[-1] = (node, i + 1)
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, 0))
        else:
            stack.pop()
            order.append(node)

    loss.grad += 1.0
    for node in reversed(order):
        if node._rule is not None:
            node._rule()


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of scalar-valued ``f`` at ``x`` against
    central differences.

    Returns max over entries of |analytic - numeric| / max(1, |analytic|,
    |numeric|).  ``f`` must be deterministic (no live dropout).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ShapeError(f"gradcheck: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = probe.grad.copy()

    base = probe.data.copy()
    numeric = np.zeros_like(analytic)
    flat_base = base.reshape(-1)
    flat_num = numeric.reshape(-1)
    with no_grad():
        for i in range(flat_base.size):
            orig = flat_base[i]
            pert = base.copy().reshape(-1)
            pert[i] = orig + eps
            plus = f(Tensor(pert.reshape(base.shape))).item()
            pert[i] = orig - eps
            minus = f(Tensor(pert.reshape(base.shape))).item()
            flat_num[i] = (plus - minus) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
