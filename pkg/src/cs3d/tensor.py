"""Dense float64 tensors with tape-based reverse-mode differentiation.

A tensor created by an operation remembers its parents and a backward rule
mapping the upstream gradient to one gradient per parent.  :func:`backward`
walks the tape once in reverse topological order, summing contributions from
every consumer, and deposits the result on leaves that require grad.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

MAX_RANK = 5

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if 0 in arr.shape:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap an op result, recording it on the tape when any parent needs grad."""
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("scalar-mul", self, -1.0), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __neg__(self):
        return elementwise("scalar-mul", self, -1.0)

    def sum(self, dims=None, keepdim=False):
        return reduce("sum", self, dims, keepdim)

    def mean(self, dims=None, keepdim=False):
        return reduce("mean", self, dims, keepdim)

    def max(self, dims=None, keepdim=False):
        return reduce("max", self, dims, keepdim)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """add / sub / mul between tensors (numpy broadcasting), or scalar-add / scalar-mul."""
    if op in ("scalar-add", "scalar-mul"):
        s = float(b)
        if op == "scalar-add":
            return Tensor.from_op(a.data + s, (a,), lambda g: (g,), op)
        return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,), op)

    if not isinstance(b, Tensor):
        if np.ndim(b) == 0:
            if op == "add":
                return elementwise("scalar-add", a, b)
            if op == "sub":
                return elementwise("scalar-add", a, -float(b))
            return elementwise("scalar-mul", a, b)
        b = Tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None

    if op == "add":
        data = a.data + b.data
        back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    elif op == "sub":
        data = a.data - b.data
        back = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    elif op == "mul":
        data = a.data * b.data
        back = lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return Tensor.from_op(data, (a, b), back, op)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; the gradient goes to ``a`` on ties."""
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shapes {a.shape} and {b.shape} differ")
    take_a = a.data >= b.data
    return Tensor.from_op(
        np.where(take_a, a.data, b.data), (a, b), lambda g: (np.where(take_a, g, 0.0), np.where(take_a, 0.0, g)), "maximum"
    )


def sigmoid(x: Tensor) -> Tensor:
    s = _logistic(x.data)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _logistic(z: np.ndarray) -> np.ndarray:
    return expit(np.asarray(z, dtype=np.float64))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)
    return Tensor.from_op(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return Tensor.from_op(data, tuple(xs), back, "concat")


# ---------------------------------------------------------------------------
# reductions


def _norm_dims(dims, ndim: int) -> tuple[int, ...]:
    if dims is None:
        return tuple(range(ndim))
    if isinstance(dims, int):
        dims = (dims,)
    out = []
    for d in dims:
        if not -ndim <= d < ndim:
            raise ShapeError(f"axis {d} is invalid for a rank-{ndim} tensor")
        out.append(d % ndim)
    return tuple(sorted(set(out)))


def reduce(op: str, x: Tensor, dims=None, keepdim: bool = False) -> Tensor:
    """sum / mean / max over ``dims``.

    max routes the gradient to a single element per output: the first maximum
    in row-major order over the reduced axes.
    """
    dims = _norm_dims(dims, x.ndim)
    kept_shape = tuple(1 if i in dims else n for i, n in enumerate(x.shape))
    count = int(np.prod([x.shape[d] for d in dims])) if dims else 1

    def finish(data_kept):
        return data_kept if keepdim else data_kept.reshape(tuple(n for i, n in enumerate(x.shape) if i not in dims))

    if op in ("sum", "mean"):
        data = x.data.sum(axis=dims, keepdims=True)
        scale = 1.0 if op == "sum" else 1.0 / count
        if op == "mean":
            data = data * scale

        def back(g):
            return (np.broadcast_to(g.reshape(kept_shape) * scale, x.shape).copy(),)

        return Tensor.from_op(finish(data), (x,), back, op)

    if op == "max":
        rest = tuple(i for i in range(x.ndim) if i not in dims)
        moved = np.transpose(x.data, rest + dims)
        flat = moved.reshape(moved.shape[: len(rest)] + (count,))
        idx = np.argmax(flat, axis=-1)
        data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        data_kept = data.reshape(kept_shape)

        def back(g):
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
            gm = gflat.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(rest + dims)),)

        return Tensor.from_op(finish(data_kept), (x,), back, "max")

    raise ValueError(f"unknown reduce op {op!r}")


# ---------------------------------------------------------------------------
# linear


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y[n, k] = sum_f x[n, f] * weight[f, k] + bias[k]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    data = x.data @ weight.data
    if bias is not None:
        data = data + bias.data

    def back(g):
        grads = [g @ weight.data.T, x.data.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(data, parents, back, "linear")


# ---------------------------------------------------------------------------
# backward


def graph_of(root: Tensor) -> list[Tensor]:
    """Recorded nodes reachable from ``root`` in topological order (inputs first)."""
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


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = graph_of(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        # tape is single-use
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class CheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    h: float
    per_tensor: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}, h {self.h:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero coordinates from amplifying roundoff."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> CheckReport:
    """Compare tape gradients of ``loss_fn()`` against central differences for each tensor.

    Tensors are perturbed in place and restored.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    tensors = list(tensors)
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with_grad = loss_fn()
    backward(with_grad)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    errors = []
    with no_grad():
        for t, a in zip(tensors, analytic):
            numeric = np.empty_like(t.data)
            flat = t.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn().item()
                flat[i] = orig - h
                fm = loss_fn().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2.0 * h)
            if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(a))):
                errors.append(float("inf"))
            else:
                errors.append(float(relative_error(a, numeric, floor).max()))
    for t, s in zip(tensors, saved):
        t.requires_grad = s
        t.grad = None
    worst = max(errors) if errors else 0.0
    return CheckReport(worst, bool(worst < tol), tol, h, errors)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4, tol: float = 1e-4) -> CheckReport:
    """Central-difference check of d f(x) / dx for scalar-valued ``f``."""
    return check_gradients(lambda: f(x), [x], h=h, tol=tol)
