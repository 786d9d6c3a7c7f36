"""Small dense reverse-mode differentiation engine on float64 numpy arrays.

Every arithmetic primitive checks its result for NaN/Inf, except inside the
perturbed evaluations of ``gradient_errors``, which check only the scalar
they produce. Broadcasting is limited to
scalar scaling and the explicit ``add_bias``; every other binary op needs
identical shapes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_GRAD_ENABLED = True
_CHECK_FINITE = True


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (forward-only, faster)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def _unchecked():
    """Skip per-primitive finiteness checks; callers must check the final value."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = False
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "op", "_parents", "_backward", "_consumed")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf"):
        value = np.array(value, dtype=np.float64)
        if not _all_finite(value):
            raise NonFiniteError(f"non-finite value in {op}")
        self.value = value
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


# ufunc reductions called directly skip the ndarray.sum/min/max wrappers,
# which dominate on the tiny arrays used in gradient checks
_add_reduce = np.add.reduce
_min_reduce = np.minimum.reduce
_max_reduce = np.maximum.reduce


def _all_finite(value: np.ndarray) -> bool:
    # a NaN or inf anywhere makes the sum non-finite; the full scan only
    # runs to rule out overflow of a sum of finite values
    return math.isfinite(_add_reduce(value, axis=None)) or bool(np.isfinite(value).all())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True, op="param")


def _result(value: np.ndarray, parents: tuple[Tensor, ...], backward, op: str, check: bool = True) -> Tensor:
    # pure indexing ops pass check=False: their inputs were already checked
    if check and _CHECK_FINITE and not _all_finite(value):
        raise NonFiniteError(f"non-finite result in {op}")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ bv.T)
        if b.requires_grad:
            _accum(b, av.T @ g)

    return _result(av @ bv, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.value + b.value, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.value - b.value, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def backward(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return _result(av * bv, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _result(a.value * c, (a,), backward, "scale")


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add the vector ``b`` (shape ``(d,)``) to every row of ``a`` (``(n, d)``)."""
    if a.value.ndim != 2 or b.value.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: incompatible shapes {a.shape} + {b.shape}")

    def backward(g):
        _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _result(a.value + b.value, (a, b), backward, "add_bias")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    av = a.value
    factor = np.where(av > 0, 1.0, slope)

    def backward(g):
        _accum(a, g * factor)

    return _result(av * factor, (a,), backward, "leaky_relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)

    def backward(g):
        _accum(a, g * (1.0 - y * y))

    return _result(y, (a,), backward, "tanh")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.value)

    def backward(g):
        _accum(a, g * y)

    return _result(y, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av <= 0):
        raise NonFiniteError("log of non-positive value")

    def backward(g):
        _accum(a, g / av)

    return _result(np.log(av), (a,), backward, "log")


def masked_softmax_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax restricted to ``mask``; masked-out entries are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if a.value.ndim != 2 or mask.shape != a.shape:
        raise ShapeError(f"masked_softmax_rows: mask {mask.shape} vs input {a.shape}")
    if not np.all(mask.any(axis=1)):
        raise AutodiffError("masked_softmax_rows: a row has no allowed entry")
    z = np.where(mask, a.value, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        _accum(a, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _result(y, (a,), backward, "masked_softmax_rows")


def logsumexp_rows(a: Tensor) -> Tensor:
    """Stable ``log(sum(exp(row)))`` for each row; returns shape ``(n,)``."""
    if a.value.ndim != 2 or a.shape[1] == 0:
        raise ShapeError(f"logsumexp_rows: need a non-empty matrix, got {a.shape}")
    m = a.value.max(axis=1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=1, keepdims=True)
    y = (np.log(s) + m)[:, 0]
    soft = e / s

    def backward(g):
        _accum(a, soft * g[:, None])

    return _result(y, (a,), backward, "logsumexp_rows")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "logaddexp")
    y = np.logaddexp(a.value, b.value)

    def backward(g):
        _accum(a, g * np.exp(a.value - y))
        _accum(b, g * np.exp(b.value - y))

    return _result(y, (a, b), backward, "logaddexp")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows of an ``(n, d)`` matrix, as a ``(1, d)`` row."""
    if a.value.ndim != 2 or a.shape[0] == 0:
        raise ShapeError(f"mean_rows: need a non-empty matrix, got {a.shape}")
    n = a.shape[0]

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape))

    return _result(a.value.mean(axis=0, keepdims=True), (a,), backward, "mean_rows")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape))

    return _result(np.array(a.value.sum()), (a,), backward, "sum_all")


def dot(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "dot")
    av, bv = a.value, b.value

    def backward(g):
        _accum(a, g * bv)
        _accum(b, g * av)

    return _result(np.array(np.sum(av * bv)), (a, b), backward, "dot")


def squared_error_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean of ``(a - b)**2`` over every element."""
    _same_shape(a, b, "squared_error_mean")
    if a.size == 0:
        raise ShapeError("squared_error_mean: empty input")
    diff = a.value - b.value
    n = diff.size

    def backward(g):
        _accum(a, g * 2.0 * diff / n)
        _accum(b, -g * 2.0 * diff / n)

    return _result(np.array(np.mean(diff * diff)), (a, b), backward, "squared_error_mean")


def l2_norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of every row; returns shape ``(n,)``. Subgradient 0 at the origin."""
    if a.value.ndim != 2:
        raise ShapeError(f"l2_norm_rows: need a matrix, got {a.shape}")
    norms = np.sqrt(np.sum(a.value * a.value, axis=1))
    safe = np.where(norms > 0, norms, 1.0)

    def backward(g):
        _accum(a, a.value * (np.where(norms > 0, g, 0.0) / safe)[:, None])

    return _result(norms, (a,), backward, "l2_norm_rows")


def normalize_rows(a: Tensor) -> Tensor:
    """Scale every row to unit length; zero rows stay zero with zero gradient."""
    if a.value.ndim != 2:
        raise ShapeError(f"normalize_rows: need a matrix, got {a.shape}")
    norms = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    y = np.where(norms > 0, a.value / safe, 0.0)

    def backward(g):
        proj = np.sum(g * y, axis=1, keepdims=True)
        _accum(a, np.where(norms > 0, (g - y * proj) / safe, 0.0))

    return _result(y, (a,), backward, "normalize_rows")


def select_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("select_rows: indices must be one-dimensional")
    if idx.size and (_min_reduce(idx) < 0 or _max_reduce(idx) >= a.shape[0]):
        raise ShapeError(f"select_rows: index out of range for {a.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _result(a.value[idx], (a,), backward, "select_rows", check=False)


def gather(a: Tensor, rows: Sequence[int], cols: Sequence[int] | None = None) -> Tensor:
    """``a[rows, cols]`` for a matrix, or ``a[rows]`` for a vector; returns a vector."""
    r = np.asarray(rows, dtype=np.intp)
    if cols is None:
        if a.value.ndim != 1:
            raise ShapeError("gather without cols needs a vector")
        key = (r,)
    else:
        c = np.asarray(cols, dtype=np.intp)
        if a.value.ndim != 2 or c.shape != r.shape:
            raise ShapeError("gather: need a matrix and equal-length row/col indices")
        key = (r, c)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, key, g)
        _accum(a, full)

    return _result(a.value[key], (a,), backward, "gather", check=False)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_rows: nothing to concatenate")
    width = parts[0].shape[1:]
    for p in parts:
        if p.value.ndim != 2 or p.shape[1:] != width:
            raise ShapeError("concat_rows: column mismatch")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                _accum(p, g[lo:hi])

    return _result(np.concatenate([p.value for p in parts], axis=0), parts, backward, "concat_rows", check=False)


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: need a matrix, got {a.shape}")

    def backward(g):
        _accum(a, g.T)

    return _result(a.value.T.copy(), (a,), backward, "transpose", check=False)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.value, requires_grad=False, op="detach")


# ------------------------------------------------------------------ backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            s = state.get(key)
            if s == 2:
                continue
            if s == 1:
                raise AutodiffError("cycle detected in computation graph")
            state[key] = 1
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            ps = state.get(id(parent))
            if ps == 1:
                raise AutodiffError("cycle detected in computation graph")
            if ps is None:
                stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires it.

    Gradients accumulate into existing leaf ``.grad`` arrays; zero them
    between optimisation steps. A root may only be swept once.
    """
    if loss.value.size != 1 or loss.value.ndim not in (0, 1, 2):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise AutodiffError("backward already ran on this graph")
    loss._consumed = True
    if not loss.requires_grad:
        return
    order = _topological(loss)
    if loss.is_leaf:
        _accum(loss, np.ones_like(loss.value))
        return
    loss.grad = np.ones_like(loss.value)
    try:
        for node in reversed(order):
            if node.is_leaf or node.grad is None:
                continue
            node._backward(node.grad)
    finally:
        # interior nodes only buffer gradients during the sweep
        for node in order:
            if not node.is_leaf:
                node.grad = None

def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- grad check

def _as_items(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(str(i), p) for i, p in enumerate(params)]


def gradient_errors(fn: Callable[[], Tensor], params, eps: float = 1e-5) -> dict[str, float]:
    """Per-parameter max relative error between backward and central differences.

    The relative error of a coordinate is ``|a - n| / max(1, |a|, |n|)``.
    ``fn`` takes no arguments and reads the parameters it closes over.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    items = _as_items(params)
    zero_grad(p for _, p in items)
    loss = fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for name, p in items}
    errors = {}
    # the checked pass above already ran at the base point; perturbed
    # evaluations only need their scalar output to be finite
    with no_grad(), _unchecked():
        for name, p in items:
            flat = p.value.reshape(-1)
            ana = analytic[name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"non-finite evaluation while perturbing {name}[{i}]")
                num = (fp - fm) / (2.0 * eps)
                err = abs(ana[i] - num) / max(1.0, abs(ana[i]), abs(num))
                worst = max(worst, err)
            errors[name] = worst
    zero_grad(p for _, p in items)
    return errors


def grad_check(fn: Callable[[], Tensor], params, eps: float = 1e-5) -> float:
    errors = gradient_errors(fn, params, eps)
    return max(errors.values(), default=0.0)
