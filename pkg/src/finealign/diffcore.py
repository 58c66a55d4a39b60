"""Reverse-mode differentiable float64 arrays.

Every kernel returns a new :class:`Tensor`. When at least one input requires a
gradient the output keeps references to its inputs together with a backward
rule, so the graph reachable from a scalar loss *is* the tape. ``backward``
linearises that graph into a topological order and replays it once in reverse.

The tape is define-by-run: it is rebuilt from scratch on every forward pass and
owned by whichever caller holds the root tensor.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
NORMALIZE_EPS = 1e-12


class ShapeError(ValueError):
    """A kernel received operands whose shapes do not conform."""

    def __init__(self, kernel: str, *shapes, detail: str = ""):
        self.kernel = kernel
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{kernel}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradCheckError(RuntimeError):
    """Raised when a gradient check cannot be carried out meaningfully."""


class Tensor:
    """An n-d float64 array that can take part in reverse-mode differentiation.

    ``grad`` is a zero buffer of the same shape for tensors created with
    ``requires_grad=True`` and ``None`` otherwise. ``meta`` carries kernel
    diagnostics such as the zero-norm flag from :func:`l2_normalize`.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self.meta: dict = {}
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.name = None
        out.meta = {}
        out.grad = None
        out.op = op
        if any(p.requires_grad for p in parents):
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
        return float(self.data)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.name = self.name
        t.meta = {}
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar --------------------------------------------------------

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(kernel: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kernel, a.shape, b.shape) from None


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(ad * bd, (a, b), bw, "multiply")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(out, (a, b), bw, "divide")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(
        ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "power"
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero wherever clamping is active."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return Tensor._result(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor._result(out, (a,), bw, "gelu")


# -- shape manipulation -----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    src = a.shape
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape, detail="need at least 2 dims")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inverse = tuple(np.argsort(axes))
    return Tensor._result(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat", detail="no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def take_slice(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]
    src = a.shape

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(src)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), bw, "slice")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError("embedding", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, ids.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            "embedding", table.shape, ids.shape, detail=f"id out of range [0, {table.shape[0]})"
        )
    rows = table.shape

    def bw(g):
        full = np.zeros(rows)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (full,)

    return Tensor._result(table.data[ids], (table,), bw, "embedding")


# -- reductions ---------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean", a.shape, detail="empty reduction")
    out = a.data.mean(axis=axes, keepdims=keepdims)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return Tensor._result(np.asarray(out, dtype=np.float64), (a,), bw, "mean")


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product following numpy broadcasting of leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


# -- normalisation and softmax ------------------------------------------------------


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), bw, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._result(p, (x,), bw, "softmax")


def softmax_rowwise(logits) -> Tensor:
    """Softmax over each row of a 2-D tensor, with per-row max subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("softmax_rowwise", logits.shape, detail="expected 2-D logits")
    return softmax(logits, axis=1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), bw, "log_softmax")


def l2_normalize(x, axis: int = -1, eps: float = NORMALIZE_EPS) -> Tensor:
    """Scale every slice along ``axis`` to unit L2 norm.

    Slices with norm below ``eps`` are mapped to zero and reported through
    ``out.meta["zero_norm"]`` (a boolean array, one entry per slice) and
    ``out.meta["any_zero_norm"]``.
    """
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    zero = norm < eps
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, xd / safe)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(zero, 0.0, (g - y * dot) / safe),)

    out = Tensor._result(y, (x,), bw, "l2_normalize")
    out.meta["zero_norm"] = np.squeeze(zero, axis=axis)
    out.meta["any_zero_norm"] = bool(zero.any())
    return out


# -- tape -----------------------------------------------------------------------------


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of every recorded node reachable from ``root``.

    Inputs always precede the operations that consume them. Iterative DFS keeps
    deep graphs clear of the recursion limit.
    """
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be a scalar")
    if not root.requires_grad:
        raise GradCheckError("backward: root does not depend on any parameter")
    tape = build_tape(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# -- verification ------------------------------------------------------------------------


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor] | dict,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative disagreement between analytic and central-difference gradients.

    The error for one coordinate is ``|a - n| / max(1, |a|, |n|)``. With
    ``max_entries`` set, only that many randomly chosen coordinates per
    parameter are probed.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    if isinstance(params, dict):
        params = list(params.values())
    params = list(params)

    first = loss_fn()
    second = loss_fn()
    if first.data.tobytes() != second.data.tobytes():
        raise GradCheckError("loss function is not deterministic")

    for p in params:
        p.zero_grad()
    backward(second)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        if max_entries is None or max_entries >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            plus = float(loss_fn().data)
            flat[i] = orig - h
            minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (plus - minus) / (2 * h)
            a = float(grad.reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
