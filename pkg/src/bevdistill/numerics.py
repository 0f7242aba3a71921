"""Dense f64 tensors with reverse-mode automatic differentiation.

The graph is recorded implicitly: every op returns a :class:`Tensor` that keeps
references to its parents and a closure mapping the output gradient to parent
gradients. :meth:`Tensor.backward` orders the recorded nodes topologically and
visits each one exactly once, accumulating gradients into shared parents.

Elementwise ops broadcast like numpy; gradients are summed back to the
operand shapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

ArrayLike = "np.ndarray | float | Sequence"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    # make ``ndarray <op> Tensor`` defer to the Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) else data
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ------------------------------------------------------
    def backward(self, grad: np.ndarray | float | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _stable_sigmoid(-x),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where the input is strictly inside."""
    a = as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, floor: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax.

    ``mask`` (broadcastable boolean) removes entries from the normalisation; a
    slice with no valid entry yields all zeros rather than NaN.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def backward(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.data[index]), (a,), backward)


def take_rows(a, index: np.ndarray) -> Tensor:
    """Gather along axis 0 (``a[index]``); the backward pass is a scatter-add kernel."""
    a = as_tensor(a)
    index = np.ascontiguousarray(index, dtype=np.int64)
    out = a.data[index]

    def backward(g):
        flat = np.ascontiguousarray(g.reshape(len(index), -1))
        summed = kernels.scatter_add_rows(index.reshape(-1), flat, a.shape[0])
        return (summed.reshape(a.shape),)

    return _make(out, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), backward)


def scatter_sum(values, index: np.ndarray, n_rows: int) -> Tensor:
    """Row scatter-add into ``n_rows`` rows; negative indices are dropped.

    Summation runs in input order, so the result is bitwise reproducible.
    """
    values = as_tensor(values)
    index = np.ascontiguousarray(index, dtype=np.int64)
    flat = np.ascontiguousarray(values.data.reshape(len(index), -1))
    out = kernels.scatter_add_rows(index, flat, n_rows).reshape((n_rows,) + values.shape[1:])

    def backward(g):
        gv = np.zeros(values.shape)
        keep = index >= 0
        gv[keep] = g[index[keep]]
        return (gv,)

    return _make(out, (values,), backward)


# ---------------------------------------------------------------------------
# bilinear sampling


def _bilinear_setup(size: int, coord: np.ndarray):
    if size == 1:
        lo = np.zeros(coord.shape, dtype=np.int64)
        return lo, lo, np.zeros_like(coord)
    lo = np.clip(np.floor(coord), 0, size - 2).astype(np.int64)
    return lo, lo + 1, coord - lo


def bilinear_sample(grid, coords) -> tuple[Tensor, np.ndarray]:
    """Sample an ``H×W×C`` grid at continuous ``(u, v)`` = (column, row) points.

    ``coords`` is ``N×2``. Lattice points reproduce cell values exactly; points
    outside ``[0, W-1]×[0, H-1]`` give a zero vector and ``valid=False``.
    Differentiable in both the grid values and the coordinates.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    if grid.ndim != 3:
        raise ValueError("grid must be H×W×C")
    h, w, c = grid.shape
    u = coords.data[:, 0]
    v = coords.data[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0, x1, fx = _bilinear_setup(w, uc)
    y0, y1, fy = _bilinear_setup(h, vc)
    flat = grid.data.reshape(h * w, c)
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    f00, f01, f10, f11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    vm = valid[:, None]
    out = (w00[:, None] * f00 + w01[:, None] * f01 + w10[:, None] * f10 + w11[:, None] * f11) * vm

    def backward(g):
        g = g * vm
        gg = gc = None
        if grid.requires_grad:
            idx = np.concatenate([i00, i01, i10, i11])
            vals = np.concatenate(
                [w00[:, None] * g, w01[:, None] * g, w10[:, None] * g, w11[:, None] * g]
            )
            gg = kernels.scatter_add_rows(idx, np.ascontiguousarray(vals), h * w).reshape(h, w, c)
        if coords.requires_grad:
            du = ((1 - fy)[:, None] * (f01 - f00) + fy[:, None] * (f11 - f10)) if w > 1 else np.zeros_like(f00)
            dv = ((1 - fx)[:, None] * (f10 - f00) + fx[:, None] * (f11 - f01)) if h > 1 else np.zeros_like(f00)
            gc = np.stack([np.sum(g * du, axis=1), np.sum(g * dv, axis=1)], axis=1)
        return gg, gc

    return _make(out, (grid, coords), backward), valid


# ---------------------------------------------------------------------------
# small layer helpers


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else y + bias


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Parameter-free normalisation of the last axis to zero mean and unit variance."""
    x = as_tensor(x)
    centred = x - mean(x, axis=-1, keepdims=True)
    var = mean(square(centred), axis=-1, keepdims=True)
    return centred / sqrt(var + eps)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(maximum(tsum(square(x), axis=axis, keepdims=True), eps * eps))
    return x / norm


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients against central differences."""

    max_rel_err: float
    passed: bool
    tol: float
    n_checked: int
    finite: bool = True
    message: str = ""
    errors: dict[str, np.ndarray] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor turns near-zero gradients into an absolute test."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
    max_per_input: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f(*inputs)`` with central differences.

    ``max_per_input`` checks a random subset of entries per input tensor, which
    keeps large parameter sets affordable.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar function")
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(np.inf, False, tol, 0, finite=False, message="non-finite function value")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    errors: dict[str, np.ndarray] = {}
    for k, t in enumerate(inputs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        if not np.all(np.isfinite(analytic)):
            return GradCheckReport(np.inf, False, tol, checked, finite=False, message=f"non-finite gradient in input {k}")
        flat = t.data.reshape(-1)
        positions = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            positions = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
        errs = np.empty(len(positions))
        for j, pos in enumerate(positions):
            orig = flat[pos]
            flat[pos] = orig + eps
            fp = f(*inputs).item()
            flat[pos] = orig - eps
            fm = f(*inputs).item()
            flat[pos] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(np.inf, False, tol, checked, finite=False, message=f"non-finite value perturbing input {k}[{pos}]")
            numeric = (fp - fm) / (2 * eps)
            errs[j] = rel_error(np.array(analytic.reshape(-1)[pos]), np.array(numeric), floor)
        checked += len(positions)
        errors[t.name or f"input{k}"] = errs
        if len(errs):
            worst = max(worst, float(errs.max()))
    return GradCheckReport(worst, worst < tol, tol, checked, errors=errors)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
