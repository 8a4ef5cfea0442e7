"""Dense tensors with reverse-mode automatic differentiation.

numpy supplies storage and kernels; this module adds the operation graph,
the reverse sweep, and a central finite-difference oracle that the test
suite uses to cross-check every analytic gradient.

Shapes are explicit throughout: binary operations demand identical shapes,
and the only broadcasting is scalar-with-tensor. Gradient buffers accumulate
across backward() calls until zero_grads() resets them.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class TensorError(Exception):
    """Base class for tensor engine failures."""


class ShapeError(TensorError):
    """Operands have incompatible shapes; the message names both."""


class RankError(TensorError):
    """Operation received a tensor of the wrong rank."""


class EmptyReductionError(TensorError):
    """Reduction over a zero-length axis."""


_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (values only).

    Useful for evaluation loops and the finite-difference oracle, where
    gradients of the recomputed values are never needed.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _resolve_dtype(dtype):
    if dtype is None:
        return None
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise TensorError(f"unknown dtype {dtype!r}, expected one of {sorted(DTYPES)}")
        return DTYPES[dtype]
    return np.dtype(dtype).type


class OpRecord:
    """Provenance of a derived tensor: its inputs and the local gradient rule.

    grad_fn maps the output gradient (ndarray) to one gradient per parent,
    aligned with `parents`; entries may be None for inputs that do not need one.
    """

    __slots__ = ("name", "parents", "grad_fn")

    def __init__(self, name: str, parents: tuple, grad_fn: Callable):
        self.name = name
        self.parents = parents
        self.grad_fn = grad_fn


class Tensor:
    """A dense float array plus the bookkeeping needed for backpropagation.

    Leaves (parameters, inputs) have op=None. Derived tensors carry an
    OpRecord linking back to their parents; creation order doubles as a
    topological order of the graph, which backward() exploits.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: OpRecord | None = None):
        if (type(data) is np.ndarray and dtype is None
                and data.dtype.kind == "f" and data.flags.c_contiguous):
            arr = data  # fast path for op outputs
        else:
            arr = np.asarray(data)
            want = _resolve_dtype(dtype)
            if want is not None:
                arr = arr.astype(want, copy=False)
            elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
                arr = arr.astype(np.float64)
            # asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
            arr = np.asarray(arr, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        head = "Tensor" if self.op is None else f"Tensor<{self.op.name}>"
        return f"{head}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are the only implicit broadcast.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def zeros(shape, dtype="f32") -> Tensor:
    return Tensor(np.zeros(shape, dtype=_resolve_dtype(dtype)))


def _check_same_dtype(a: Tensor, b: Tensor, opname: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise TensorError(f"{opname}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def _result(data, name: str, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    op = OpRecord(name, tuple(parents), grad_fn) if needs else None
    return Tensor(data, requires_grad=needs, op=op)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with the usual 1-D promotions (vec@mat, mat@vec, vec@vec)."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise RankError(f"matmul supports rank 1 and 2, got {a.shape} x {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    case = (a.ndim, b.ndim)

    def grad_fn(g):
        if case == (2, 2):
            return g @ bd.T, ad.T @ g
        if case == (1, 2):
            return g @ bd.T, np.outer(ad, g)
        if case == (2, 1):
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad  # (1, 1): dot product

    return _result(out, "matmul", (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise RankError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ: {a.shape} vs {b.shape}")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    _check_same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def add_scalar(a: Tensor, c) -> Tensor:
    c = float(c)
    return _result(a.data + c, "add_scalar", (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c) -> Tensor:
    c = float(c)
    return _result(a.data * c, "mul_scalar", (a,), lambda g: (g * c,))


def add_row_vector(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of an n-by-d matrix (explicit bias add)."""
    _check_same_dtype(m, v, "add_row_vector")
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"add_row_vector: incompatible shapes {m.shape} and {v.shape}")
    return _result(m.data + v.data[None, :], "add_row_vector", (m, v),
                   lambda g: (g, g.sum(axis=0)))


def scale_rows(m: Tensor, v: Tensor) -> Tensor:
    """Multiply row i of m by v[i]."""
    _check_same_dtype(m, v, "scale_rows")
    if m.ndim != 2 or v.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {m.shape} and {v.shape}")
    md, vd = m.data, v.data
    return _result(md * vd[:, None], "scale_rows", (m, v),
                   lambda g: (g * vd[:, None], (g * md).sum(axis=1)))


def scale_cols(m: Tensor, v: Tensor) -> Tensor:
    """Multiply column j of m by v[j]."""
    _check_same_dtype(m, v, "scale_cols")
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"scale_cols: incompatible shapes {m.shape} and {v.shape}")
    md, vd = m.data, v.data
    return _result(md * vd[None, :], "scale_cols", (m, v),
                   lambda g: (g * vd[None, :], (g * md).sum(axis=0)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, a.data.dtype.type(0)), "relu", (a,),
                   lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    s = s.astype(a.data.dtype, copy=False)
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise TensorError("log: nonpositive input")
    ad = a.data
    return _result(np.log(ad), "log", (a,), lambda g: (g / ad,))


def rsqrt(a: Tensor) -> Tensor:
    """Elementwise x**-0.5 for strictly positive input."""
    if np.any(a.data <= 0):
        raise TensorError("rsqrt: nonpositive input")
    out = a.data ** -0.5
    ad = a.data
    return _result(out, "rsqrt", (a,), lambda g: (g * (-0.5) * out / ad,))


def softmax(a: Tensor, axis: int, scale: float = 1.0) -> Tensor:
    """Softmax of scale*a along an axis, stabilized by max subtraction.

    Every slice along the axis sums to 1 and is strictly positive; equal
    inputs yield the uniform distribution.
    """
    if not (-a.ndim <= axis < a.ndim):
        raise RankError(f"softmax: axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    scale = float(scale)
    if not np.isfinite(scale):
        raise TensorError("softmax: scale must be finite")
    z = scale * a.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    y = y.astype(a.data.dtype, copy=False)

    def grad_fn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (scale * y * (g - inner),)

    return _result(y, "softmax", (a,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    shape, dt = a.shape, a.data.dtype
    return _result(np.asarray(a.data.sum(), dtype=dt), "sum_all", (a,),
                   lambda g: (np.full(shape, g, dtype=dt),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    if not (-a.ndim <= axis < a.ndim):
        raise RankError(f"sum_axis: axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(a.data.sum(axis=axis), "sum_axis", (a,), grad_fn)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    if not (-a.ndim <= axis < a.ndim):
        raise RankError(f"mean_axis: axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    n = a.shape[axis]
    if n == 0:
        raise EmptyReductionError(f"mean over empty axis {axis} of shape {a.shape}")
    shape = a.shape

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _result(a.data.mean(axis=axis), "mean_axis", (a,), grad_fn)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; all other dimensions must agree."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_last: no parts")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        _check_same_dtype(parts[0], p, "concat_last")
        if p.ndim != parts[0].ndim or p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading dims differ: {parts[0].shape} vs {p.shape}")
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def grad_fn(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=-1))

    return _result(out, "concat_last", parts, grad_fn)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack K equal-length vectors into a K-by-d matrix."""
    parts = list(parts)
    if not parts:
        raise ShapeError("stack_rows: no parts")
    d = parts[0].shape
    for p in parts:
        _check_same_dtype(parts[0], p, "stack_rows")
        if p.ndim != 1 or p.shape != d:
            raise ShapeError(f"stack_rows: expected vectors of shape {d}, got {p.shape}")
    out = np.stack([p.data for p in parts], axis=0)

    def grad_fn(g):
        return tuple(g[i] for i in range(len(parts)))

    return _result(out, "stack_rows", parts, grad_fn)


def row(m: Tensor, i: int) -> Tensor:
    if m.ndim != 2:
        raise RankError(f"row expects a matrix, got shape {m.shape}")
    if not (0 <= i < m.shape[0]):
        raise ShapeError(f"row index {i} out of range for shape {m.shape}")
    shape, dt = m.shape, m.data.dtype

    def grad_fn(g):
        z = np.zeros(shape, dtype=dt)
        z[i] = g
        return (z,)

    return _result(m.data[i].copy(), "row", (m,), grad_fn)


def col(m: Tensor, j: int) -> Tensor:
    if m.ndim != 2:
        raise RankError(f"col expects a matrix, got shape {m.shape}")
    if not (0 <= j < m.shape[1]):
        raise ShapeError(f"col index {j} out of range for shape {m.shape}")
    shape, dt = m.shape, m.data.dtype

    def grad_fn(g):
        z = np.zeros(shape, dtype=dt)
        z[:, j] = g
        return (z,)

    return _result(m.data[:, j].copy(), "col", (m,), grad_fn)


def element(v: Tensor, i: int) -> Tensor:
    """Extract one entry of a vector as a scalar tensor."""
    if v.ndim != 1:
        raise RankError(f"element expects a vector, got shape {v.shape}")
    if not (0 <= i < v.shape[0]):
        raise ShapeError(f"element index {i} out of range for shape {v.shape}")
    n, dt = v.shape[0], v.data.dtype

    def grad_fn(g):
        z = np.zeros(n, dtype=dt)
        z[i] = g
        return (z,)

    return _result(np.asarray(v.data[i], dtype=dt), "element", (v,), grad_fn)


def l2_normalize_rows(m: Tensor) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if m.ndim != 2:
        raise RankError(f"l2_normalize_rows expects a matrix, got shape {m.shape}")
    norms = np.sqrt((m.data ** 2).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise TensorError("l2_normalize_rows: zero row")
    y = m.data / norms

    def grad_fn(g):
        inner = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * inner) / norms,)

    return _result(y, "l2_normalize_rows", (m,), grad_fn)


# ---------------------------------------------------------------------------
# reverse sweep


def backward(loss: Tensor) -> None:
    """Populate .grad of every reachable leaf with d(loss)/d(leaf).

    Repeated calls accumulate; use zero_grads() between optimization steps.
    The replay order is reverse creation order, which is a valid topological
    order because parents are always created before their consumers.
    """
    if loss.shape != ():
        raise RankError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TensorError("backward: loss does not require grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        if t.op is not None:
            stack.extend(t.op.parents)

    tape = sorted((t for t in nodes.values() if t.op is not None),
                  key=lambda t: t._id, reverse=True)
    flows: dict[int, np.ndarray] = {loss._id: np.ones((), dtype=loss.data.dtype)}

    for node in tape:
        g = flows.pop(node._id, None)
        if g is None:
            continue
        grads = node.op.grad_fn(g)
        for parent, pg in zip(node.op.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            cur = flows.get(parent._id)
            flows[parent._id] = pg if cur is None else cur + pg

    for t in nodes.values():
        if t.op is None and t.requires_grad:
            g = flows.get(t._id)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_gradient(f: Callable, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+h*e_i) - f(x-h*e_i)) / (2h), one entry at a time.

    f is called with x after in-place perturbation of x.data and must return
    a scalar (float or scalar Tensor). The input is restored on exit.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(x.data.size, dtype=np.float64)
    with no_grad():  # probe values only; skip graph recording
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _as_float(f(x))
            flat[i] = orig - h
            fm = _as_float(f(x))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def _as_float(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-2) -> float:
    """Max elementwise deviation, normalized by the larger magnitude.

    The floor keeps near-zero gradients from inflating the ratio; it is far
    below the gradient scales the checks probe, so genuine formula errors
    still register.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(float(np.abs(a).max(initial=0.0)),
                float(np.abs(b).max(initial=0.0)), floor)
    return float(np.abs(a - b).max(initial=0.0)) / denom
