"""Dense tensors with reverse-mode automatic differentiation.

Values are stored in row-major numpy arrays (float64 by default, float32
selectable for release-style runs). Every differentiable op records a
backward rule onto the computation graph; calling ``backward`` on a scalar
replays those rules in reverse and accumulates gradients into the
``requires_grad`` leaves. The graph behind one result is single-use.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes cannot be combined by the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op."""


class InvalidAxis(ValueError):
    """Axis argument out of range or repeated."""


class NotScalar(ValueError):
    """backward() requires a single-element tensor."""


class TapeAlreadyConsumed(RuntimeError):
    """backward() was already called on this result."""


class NonFiniteOutput(FloatingPointError):
    """A checked computation produced NaN or infinity."""


_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float64
_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Set construction dtype for new tensors: "f32", "f64", or a numpy dtype."""
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unknown precision {dtype!r}, expected f32 or f64")
        dtype = _DTYPE_NAMES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


TensorLike = Union["Tensor", float, int, np.ndarray]


class Tensor:
    """A dense n-dimensional array that can participate in autodiff.

    Data is immutable by convention after construction; only the ``grad``
    buffer is mutated (by ``backward`` and optimizers). Leaves created with
    ``requires_grad=True`` hold a zero-initialized gradient buffer of the
    same shape, into which successive backward passes accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype, copy=True)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self._consumed = False

    # -- basic introspection -------------------------------------------------

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
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._vjp = None
        t._consumed = False
        return t

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        head = np.array2string(self.data, precision=5, threshold=16)
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, data={head})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, like=self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf.

        ``self`` must be a single-element tensor. The recorded graph is
        released afterwards; a second call raises TapeAlreadyConsumed.
        Backward passes over disjoint graphs sharing a leaf accumulate
        additively into that leaf's grad buffer.
        """
        if self.data.size != 1:
            raise NotScalar(f"backward() needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise TapeAlreadyConsumed("backward() already ran on this tensor")
        self._consumed = True
        if not self.requires_grad:
            return
        order = _topo_order(self)
        _accum_grad(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._vjp is not None:
                node._vjp(node.grad)
        # free interior buffers and rules; leaves keep their grads
        for node in order:
            if node._vjp is not None:
                node.grad = None
                node._vjp = None
                node._parents = ()


def _topo_order(root: Tensor) -> list:
    """Iterative post-order over the recorded graph (children before parents)."""
    order: list = []
    seen = set()
    stack = [(root, False)]
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


def _accum_grad(t: Tensor, delta: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += delta


def _make_result(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.grad = None
    out._parents = tuple(parents) if track else ()
    out._vjp = vjp if track else None
    out._consumed = False
    return out


def _wrap(x: TensorLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _default_dtype
    return Tensor(x, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_data(a: Tensor, b: Tensor, op_name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op_name}: shapes {a.shape} and {b.shape} do not broadcast")
    return a.data, b.data


# -- elementwise ops ---------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    da, db = _broadcast_data(a, b, "add")
    out = da + db

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum_grad(b, _unbroadcast(g, b.shape))

    return _make_result(out, (a, b), vjp)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    da, db = _broadcast_data(a, b, "sub")
    out = da - db

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum_grad(b, _unbroadcast(-g, b.shape))

    return _make_result(out, (a, b), vjp)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    da, db = _broadcast_data(a, b, "mul")
    out = da * db

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, _unbroadcast(g * db, a.shape))
        if b.requires_grad:
            _accum_grad(b, _unbroadcast(g * da, b.shape))

    return _make_result(out, (a, b), vjp)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a = _wrap(a, like=b if isinstance(b, Tensor) else None)
    b = _wrap(b, like=a)
    da, db = _broadcast_data(a, b, "div")
    if np.any(db == 0.0):
        raise DomainError("div: denominator contains exact zero")
    out = da / db

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, _unbroadcast(g / db, a.shape))
        if b.requires_grad:
            _accum_grad(b, _unbroadcast(-g * da / (db * db), b.shape))

    return _make_result(out, (a, b), vjp)


def abs_(a: TensorLike) -> Tensor:
    a = _wrap(a)
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * sign)

    return _make_result(out, (a,), vjp)


def pow_(a: TensorLike, exponent: float) -> Tensor:
    """Raise to a scalar power.

    Non-integer exponents are only defined for non-negative bases (the
    intended use is magnitudes raised to p or 1/p).
    """
    a = _wrap(a)
    exponent = float(exponent)
    if exponent != round(exponent) and np.any(a.data < 0.0):
        raise DomainError("pow: non-integer exponent with negative base")
    out = np.power(a.data, exponent)
    da = a.data

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * exponent * np.power(da, exponent - 1.0))

    return _make_result(out, (a,), vjp)


def sqrt(a: TensorLike) -> Tensor:
    return pow_(a, 0.5)


def exp(a: TensorLike) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * out)

    return _make_result(out, (a,), vjp)


def log(a: TensorLike) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    out = np.log(a.data)
    da = a.data

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g / da)

    return _make_result(out, (a,), vjp)


def tanh(a: TensorLike) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * (1.0 - out * out))

    return _make_result(out, (a,), vjp)


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # split on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: TensorLike) -> Tensor:
    a = _wrap(a)
    out = _sigmoid_data(a.data)

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * out * (1.0 - out))

    return _make_result(out, (a,), vjp)


def swish(a: TensorLike) -> Tensor:
    """swish(x) = x * sigmoid(x)."""
    a = _wrap(a)
    s = _sigmoid_data(a.data)
    out = a.data * s

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * (s + out * (1.0 - s)))

    return _make_result(out, (a,), vjp)


def relu(a: TensorLike) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    mask = (a.data > 0.0).astype(a.data.dtype)

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * mask)

    return _make_result(out, (a,), vjp)


def elu(a: TensorLike, alpha: float = 1.0) -> Tensor:
    a = _wrap(a)
    neg = a.data < 0.0
    expm1 = np.expm1(a.data)
    out = np.where(neg, alpha * expm1, a.data)
    dgrad = np.where(neg, alpha * (expm1 + 1.0), 1.0)

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g * dgrad)

    return _make_result(out, (a,), vjp)


_UNARY_KINDS = {
    "abs": abs_,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "swish": swish,
    "relu": relu,
    "elu": elu,
}
_BINARY_KINDS = {"add": add, "sub": sub, "mul": mul, "div": div, "pow": pow_}


def elementwise(kind: str, a: TensorLike, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    Unary kinds take only ``a``; binary kinds broadcast ``a`` against ``b``
    with standard trailing-dimension rules ("pow" takes a scalar exponent).
    """
    if kind in _UNARY_KINDS:
        if b is not None:
            raise TypeError(f"elementwise {kind!r} is unary")
        return _UNARY_KINDS[kind](a)
    if kind in _BINARY_KINDS:
        if b is None:
            raise TypeError(f"elementwise {kind!r} needs two operands")
        return _BINARY_KINDS[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- matrix product ----------------------------------------------------------


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """2-D matrix product (M, K) x (K, N) -> (M, N)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    da, db = a.data, b.data

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g @ db.T)
        if b.requires_grad:
            _accum_grad(b, da.T @ g)

    return _make_result(out, (a, b), vjp)


# -- reductions --------------------------------------------------------------


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(ax) for ax in axes)
    norm = tuple(ax + ndim if ax < 0 else ax for ax in axes)
    if len(set(norm)) != len(norm):
        raise InvalidAxis(f"repeated axis in {axes}")
    for ax in norm:
        if not 0 <= ax < ndim:
            raise InvalidAxis(f"axis {ax} out of range for rank {ndim}")
    return norm


def _keepdims_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(a: TensorLike, axes=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _normalize_axes(axes, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axes)
    in_shape = a.shape

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, np.broadcast_to(g.reshape(kshape), in_shape))

    return _make_result(out, (a,), vjp)


def reduce_mean(a: TensorLike, axes=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _normalize_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axes)
    in_shape = a.shape

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, np.broadcast_to(g.reshape(kshape) / count, in_shape))

    return _make_result(out, (a,), vjp)


def reduce_max(a: TensorLike, axes=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    axes = _normalize_axes(axes, a.ndim)
    out = a.data.max(axis=axes, keepdims=keepdims)
    kshape = _keepdims_shape(a.shape, axes)
    mask = (a.data == out.reshape(kshape)).astype(a.data.dtype)
    # ties share the gradient equally
    mask /= mask.sum(axis=axes, keepdims=True)
    in_shape = a.shape

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, np.broadcast_to(g.reshape(kshape), in_shape) * mask)

    return _make_result(out, (a,), vjp)


def l2norm(a: TensorLike, axes=None, keepdims: bool = False) -> Tensor:
    """sqrt(sum of squares + machine tiny); the guard keeps backward finite at 0."""
    a = _wrap(a)
    axes = _normalize_axes(axes, a.ndim)
    guard = np.finfo(a.data.dtype).tiny
    sq = (a.data * a.data).sum(axis=axes, keepdims=keepdims)
    out = np.sqrt(sq + guard)
    kshape = _keepdims_shape(a.shape, axes)
    da = a.data

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, np.broadcast_to((g / out).reshape(kshape), da.shape) * da)

    return _make_result(out, (a,), vjp)


_REDUCE_KINDS = {
    "sum": reduce_sum,
    "mean": reduce_mean,
    "max": reduce_max,
    "l2norm": l2norm,
}


def reduce(kind: str, a: TensorLike, axes=None, keepdims: bool = False) -> Tensor:
    """Dispatch a reduction by name: sum, mean, max, or l2norm."""
    try:
        fn = _REDUCE_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown reduce kind {kind!r}") from None
    return fn(a, axes=axes, keepdims=keepdims)


def softmax(a: TensorLike, axis: int) -> Tensor:
    """Stable softmax along one axis: positive outputs summing to 1."""
    a = _wrap(a)
    (axis,) = _normalize_axes(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            _accum_grad(a, (g - inner) * out)

    return _make_result(out, (a,), vjp)


# -- shape ops ---------------------------------------------------------------


def reshape(a: TensorLike, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    in_shape = a.shape

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g.reshape(in_shape))

    return _make_result(out, (a,), vjp)


def transpose(a: TensorLike, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise InvalidAxis(f"transpose axes {axes} invalid for rank {a.ndim}")
    out = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        if a.requires_grad:
            _accum_grad(a, g.transpose(inverse))

    return _make_result(out, (a,), vjp)


def narrow(a: TensorLike, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _wrap(a)
    (axis,) = _normalize_axes(axis, a.ndim)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise InvalidAxis(f"narrow [{start}:{start + length}] outside axis extent {a.shape[axis]}")
    index = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))
    out = a.data[index]
    in_shape = a.shape

    def vjp(g):
        if a.requires_grad:
            full = np.zeros(in_shape, dtype=g.dtype)
            full[index] = g
            _accum_grad(a, full)

    return _make_result(out, (a,), vjp)


def concat(tensors: Iterable[TensorLike], axis: int) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    if not parts:
        raise ShapeMismatch("concat needs at least one tensor")
    (axis,) = _normalize_axes(axis, parts[0].ndim)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat shapes incompatible: {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                index = tuple(
                    slice(None) if i != axis else slice(int(lo), int(hi)) for i in range(g.ndim)
                )
                _accum_grad(p, g[index])

    return _make_result(out, tuple(parts), vjp)


def backward(loss: Tensor) -> None:
    """Module-level alias for Tensor.backward."""
    loss.backward()


# -- gradient checking -------------------------------------------------------


@dataclass
class GradcheckReport:
    """Outcome of comparing analytic gradients against central differences.

    ``max_rel_error`` is the worst elementwise |analytic - numeric| divided
    by max(1, |analytic|, |numeric|); ``worst`` locates it as
    (input index, flat element index, analytic, numeric).
    """

    max_rel_error: float
    worst: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradcheck(f: Callable, inputs, step: float = 1e-5, tol: float = 1e-6) -> GradcheckReport:
    """Compare analytic gradients of ``f(*inputs)`` with central differences.

    ``f`` must return a scalar Tensor and be a pure function of the input
    tensors' current data. Every input with ``requires_grad`` is perturbed
    elementwise by +-step. Raises NonFiniteOutput if any evaluation of
    ``f`` is NaN or infinite.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)

    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise NotScalar("gradcheck target must produce a scalar tensor")
    if not np.isfinite(out.data).all():
        raise NonFiniteOutput("gradcheck: non-finite forward value")
    out.backward()
    analytic = [t.grad.copy() if t.requires_grad else None for t in inputs]

    worst = (None, None, 0.0, 0.0)
    max_rel = 0.0
    with no_grad():
        for idx, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            flat = t.data.reshape(-1)
            ana = analytic[idx].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                hi = f(*inputs).data.reshape(())
                flat[j] = orig - step
                lo = f(*inputs).data.reshape(())
                flat[j] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise NonFiniteOutput(f"gradcheck: non-finite at input {idx}, element {j}")
                num = (hi - lo) / (2.0 * step)
                denom = max(1.0, abs(ana[j]), abs(num))
                rel = abs(ana[j] - num) / denom
                if rel > max_rel:
                    max_rel = rel
                    worst = (idx, j, float(ana[j]), float(num))
    return GradcheckReport(max_rel_error=float(max_rel), worst=worst, tol=tol)


# -- GTF1 serialization ------------------------------------------------------

GTF1_MAGIC = b"GTF1"


def save_gtf1(path, array) -> None:
    """Write a tensor file: magic, u32 LE rank, u64 LE extents, f32 LE data."""
    if isinstance(array, Tensor):
        array = array.data
    arr = np.ascontiguousarray(array)
    with open(path, "wb") as fh:
        fh.write(GTF1_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def load_gtf1(path) -> np.ndarray:
    """Read a GTF1 tensor file back as a float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != GTF1_MAGIC:
            raise ValueError(f"{path}: not a GTF1 file")
        (rank,) = struct.unpack("<I", fh.read(4))
        if rank > 32:
            raise ValueError(f"{path}: implausible rank {rank}")
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
