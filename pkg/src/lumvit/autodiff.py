"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every op records its inputs and a backward closure on the output tensor.
``Tensor.backward`` orders the recorded graph topologically and replays the
closures once each, in reverse.

Broadcasting is limited on purpose: elementwise ops accept equal shapes or a
scalar operand. Anything wider goes through an explicit op (``expand``,
``linear``, ``scale_rows``) that owns its own reduction in backward.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, OracleError, UsageError, ValidationError

_GRAD_ENABLED = True
_CHECK_FINITE = True

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_check(enabled: bool) -> bool:
    """Toggle the post-op NaN/Inf check. Returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # construction -----------------------------------------------------
    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap the result of a custom op.

        ``backward(g)`` receives the upstream gradient and must call
        ``parent._accumulate(...)`` for each parent that requires grad.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        if _CHECK_FINITE and not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite output from op '{op}'")
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # properties -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # backward ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating)):
            return scale(self, 1.0 / float(other))
        raise DimensionError("division is only supported by a python scalar")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        a._accumulate(np.asarray(g.sum(), dtype=a.dtype) if _is_scalar(a) and g.ndim else g)
        b._accumulate(np.asarray(g.sum(), dtype=b.dtype) if _is_scalar(b) and g.ndim else g)

    return Tensor.from_op(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            ga = g * b.data
            a._accumulate(np.asarray(ga.sum(), dtype=a.dtype) if _is_scalar(a) and ga.ndim else ga)
        if b.requires_grad:
            gb = g * a.data
            b._accumulate(np.asarray(gb.sum(), dtype=b.dtype) if _is_scalar(b) and gb.ndim else gb)

    return Tensor.from_op(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: a._accumulate(g * c), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return Tensor.from_op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: a._accumulate(g * pos), "relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
    out = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate((g * (cdf + x * pdf)).astype(x.dtype))

    return Tensor.from_op(out, (a,), backward, "gelu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a: Tensor, clamp: float = 0.0) -> Tensor:
    """Natural log; with ``clamp > 0`` inputs below it are raised to it
    and receive zero gradient."""
    x = a.data
    if clamp > 0:
        live = x > clamp
        xc = np.where(live, x, clamp).astype(x.dtype)
    else:
        live = None
        xc = x
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(xc)  # non-finite results are rejected by from_op

    def backward(g):
        ga = g / xc
        if live is not None:
            ga = ga * live
        a._accumulate(ga)

    return Tensor.from_op(out, (a,), backward, "log")


def absval(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: a._accumulate(g * sgn), "abs")


def square(a: Tensor) -> Tensor:
    x = a.data
    return Tensor.from_op(x * x, (a,), lambda g: a._accumulate(2.0 * g * x), "square")


def elementwise(op_kind: str, *operands) -> Tensor:
    """Dispatch by name: ``add``, ``mul``, ``relu``, ``gelu``, ``scale``."""
    if op_kind == "add":
        return add(*operands)
    if op_kind == "mul":
        return mul(*operands)
    if op_kind == "relu":
        return relu(*operands)
    if op_kind == "gelu":
        return gelu(*operands)
    if op_kind == "scale":
        return scale(*operands)
    raise ValidationError(f"unknown elementwise op '{op_kind}'")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passed unchanged to ``soft``."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: {hard.shape} vs {soft.shape}")
    return Tensor.from_op(hard, (soft,), lambda g: soft._accumulate(g), "straight_through")


def scale_rows(a: Tensor, factors: np.ndarray) -> Tensor:
    """Multiply slice ``a[b]`` by the constant ``factors[b]``."""
    f = np.asarray(factors, dtype=a.dtype).reshape((a.shape[0],) + (1,) * (a.ndim - 1))
    return Tensor.from_op(a.data * f, (a,), lambda g: a._accumulate(g * f), "scale_rows")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)
    out = np.asarray(out, dtype=a.dtype)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype))

    return Tensor.from_op(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return Tensor.from_op(out, (a,), lambda g: a._accumulate(np.transpose(g, inv)), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx], copy=True)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return Tensor.from_op(out, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return Tensor.from_op(out, tensors, backward, "concat")


def expand(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return Tensor.from_op(out, (a,), lambda g: a._accumulate(g.sum(axis=0)), "expand")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``
    with identical leading extents."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accumulate(a2.T @ g2)
            else:
                b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return Tensor.from_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias shape {b.shape}")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.reshape(-1, x.shape[-1]).T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))

    return Tensor.from_op(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# normalisation, softmax, losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(s * (g - np.sum(g * s, axis=axis, keepdims=True)))

    return Tensor.from_op(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        s = np.exp(out)
        x._accumulate(g - s * np.sum(g, axis=axis, keepdims=True))

    return Tensor.from_op(out, (x,), backward, "log_softmax")


def layernorm(x: Tensor, gain: Tensor | None, bias: Tensor | None, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis (population variance), then ``* gain + bias``."""
    if eps <= 0:
        raise ValidationError("layernorm eps must be > 0")
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g):
        gh = g * gain.data if gain is not None else g
        if x.requires_grad:
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(gx.astype(x.dtype))
        if gain is not None and gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))

    return Tensor.from_op(out.astype(x.dtype), parents, backward, "layernorm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean soft-label cross-entropy. ``targets`` is (B, K) rows summing to 1,
    or a vector of integer class ids."""
    t = np.asarray(targets)
    if t.ndim == 1:
        onehot = np.zeros(logits.shape, dtype=logits.dtype)
        onehot[np.arange(t.shape[0]), t.astype(np.int64)] = 1
        t = onehot
    t = t.astype(logits.dtype)
    if t.shape != logits.shape:
        raise DimensionError(f"cross_entropy: targets {t.shape} vs logits {logits.shape}")
    if np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-6):
        raise ValidationError("cross_entropy: target rows must sum to 1")
    ls = log_softmax(logits, axis=-1)
    return scale(tsum(mul(ls, Tensor(t))), -1.0 / logits.shape[0])


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error <= self.tol for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e.max_rel_error <= self.tol else 'FAIL'} {e.name:<32s} {e.max_rel_error:.3e}"
                for e in self.entries]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(function: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               eps: float = 1e-6, tol: float = 1e-5, floor: float = 1e-6) -> GradCheckReport:
    """Compare backward() against central differences for each parameter.

    ``function`` takes no arguments and reads the parameters by closure; any
    randomness inside it must be frozen. It is evaluated twice up front and
    rejected if the two values differ.
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    first = function()
    second = function()
    if first.data.size != 1:
        raise UsageError("grad_check needs a scalar-valued function")
    if not np.array_equal(first.data, second.data):
        raise OracleError("function is not deterministic under the frozen RNG")

    for p in params.values():
        p.grad = None
    first.backward()
    entries = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.flat
        with no_grad():
            for i in range(p.data.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(function().data)
                flat[i] = orig - eps
                fm = float(function().data)
                flat[i] = orig
                numeric.flat[i] = (fp - fm) / (2 * eps)
        entries.append(GradCheckEntry(name, relative_error(analytic, numeric, floor), analytic, numeric))
    return GradCheckReport(entries, tol)
