"""Dense float64 tensors with tape-based reverse-mode differentiation.

Supported shapes are scalars ``()``, vectors ``(n,)`` and matrices ``(m, n)``.
Elementwise ops broadcast scalars and row/column vectors against matrices;
anything fancier is out of scope. Every forward result is checked for
NaN/Inf and raises :class:`NonFiniteError` instead of letting bad values
drift into training.

Gradients are recorded per operation as vector-Jacobian closures. A
:class:`Tape` is the topologically ordered record of the ops reachable from
a scalar root; :func:`backward` sweeps it once in reverse, accumulating
gradients into every tensor that requires them. A tape is single-owner:
build the graph and run backward in one logical thread. Tensors with
``requires_grad=False`` are treated as immutable constants and are safe to
share.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import NonFiniteError, ParameterError, ShapeError

Array = np.ndarray

_GRADCHECK_EPS = 1e-12


def _as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _check_finite(a: Array, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in result of {op}")


class Tensor:
    """A dense float64 array, optionally recording onto the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjps", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        _check_finite(self.data, "Tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[Array], Array], ...] = ()
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of this tensor, cut off from the graph."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{grad})"

    # Arithmetic sugar; all logic lives in the module-level ops.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never participates in gradients."""
    return Tensor(x, requires_grad=False)


def _result(data: Array, op: str, pairs: Sequence[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    out = Tensor(data)
    out._op = op
    live = tuple((p, vjp) for p, vjp in pairs if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = tuple(p for p, _ in live)
        out._vjps = tuple(v for _, v in live)
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.data + b.data,
        "add",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.data - b.data,
        "sub",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", [(a, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.data * b.data,
        "mul",
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _result(
        a.data / b.data,
        "div",
        [
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ],
    )


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _result(
        a.data @ b.data,
        "matmul",
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
    )


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, "transpose", [(a, lambda g: g.T)])


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows ``a[indices]``; gradients scatter-add back."""
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.shape}")

    def vjp(g: Array) -> Array:
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return out

    return _result(a.data[idx], "gather_rows", [(a, vjp)])


# ---------------------------------------------------------------------------
# Nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, "exp", [(a, lambda g: g * out)])


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), "log", [(a, lambda g: g / a.data)])


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    # Subgradient 0.5*g at exactly zero; the true derivative is unbounded there.
    safe = np.where(out == 0.0, 1.0, out)
    return _result(out, "sqrt", [(a, lambda g: g * 0.5 / safe)])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, "tanh", [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _result(out, "sigmoid", [(a, lambda g: g * out * (1.0 - out))])


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed without overflow for large |x|."""
    out = np.logaddexp(0.0, a.data)
    return _result(out, "softplus", [(a, lambda g: g * expit(a.data))])


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return _result(np.maximum(a.data, floor), "clamp_min", [(a, lambda g: g * mask)])


# ---------------------------------------------------------------------------
# Reductions


def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    return _result(out, "sum", [(a, lambda g: _expand_reduced(g, a.shape, axis, keepdims))])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along an axis; the gradient flows to the first argmax."""
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g: Array) -> Array:
        mask = np.zeros_like(a.data)
        if axis is None:
            mask[np.unravel_index(np.argmax(a.data), a.shape)] = 1.0
        else:
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            np.put_along_axis(mask, idx, 1.0, axis=axis)
        return mask * _expand_reduced(g, a.shape, axis, keepdims)

    return _result(out, "max", [(a, vjp)])


# ---------------------------------------------------------------------------
# Stabilized composites


def logsumexp(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with max-subtraction for stability."""
    shift = np.max(a.data, axis=axis, keepdims=True)
    e = exp(sub(a, constant(shift)))
    s = tsum(e, axis=axis, keepdims=keepdims)
    offset = shift if keepdims else np.squeeze(shift, axis=axis)
    return add(log(s), constant(offset))


def softmax_rows(x: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of ``x / temperature``.

    Max-subtraction keeps the exponentials in range even for temperatures as
    small as the defaults used by the contrastive losses.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    y = mul(x, 1.0 / temperature)
    e = exp(sub(y, constant(np.max(y.data, axis=1, keepdims=True))))
    return div(e, tsum(e, axis=1, keepdims=True))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm < eps are scaled by 1/eps."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got shape {x.shape}")
    norms = sqrt(tsum(mul(x, x), axis=1, keepdims=True))
    return div(x, clamp_min(norms, eps))


# ---------------------------------------------------------------------------
# Backward pass


class Tape:
    """Topologically ordered record of the ops reachable from a root.

    ``nodes`` lists every tensor in the graph with all inputs preceding the
    tensors that consume them; a backward sweep visits each node exactly once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every requires_grad ancestor of a scalar loss.

    Gradients from shared subexpressions sum; repeated calls accumulate into
    any existing ``.grad`` buffers.
    """
    if loss.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    pending: dict[int, Array] = {id(loss): np.ones(())}
    for node in reversed(tape.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.requires_grad:
            node.grad = grad if node.grad is None else node.grad + grad
        for parent, vjp in zip(node._parents, node._vjps):
            contribution = vjp(grad)
            held = pending.get(id(parent))
            pending[id(parent)] = contribution if held is None else held + contribution
    return tape


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued. Per coordinate the error is
    ``|analytic - fd| / (|analytic| + |fd| + 1e-12)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ParameterError(f"step h must lie in [1e-7, 1e-3], got {h}")
    leaf = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(leaf)
    if out.shape != ():
        raise ShapeError("gradcheck requires a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

    base = np.array(x.data, copy=True)
    flat = base.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            probe = flat.copy()
            probe[i] += sign * h
            value = f(Tensor(probe.reshape(base.shape))).item()
            fd[i] += value if slot == 0 else -value
        fd[i] /= 2.0 * h
    fd = fd.reshape(base.shape)
    rel = np.abs(analytic - fd) / (np.abs(analytic) + np.abs(fd) + _GRADCHECK_EPS)
    return float(rel.max()) if rel.size else 0.0
