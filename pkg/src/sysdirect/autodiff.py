"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every primitive computes its forward value eagerly and, when any input
requires a gradient, records a closure that maps the output gradient to
input gradients.  ``Tensor.backward`` walks the recorded graph in reverse
topological order.

Broadcasting is deliberately narrow: a binary op accepts operands whose
shapes are equal, or where one shape is a suffix of the other (leading
batch dimensions), or where one side is a scalar.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import DoubleBackwardError, EvaluationError, NumericError, RankError, ShapeError

__all__ = [
    "Tensor", "tensor", "no_grad", "debug_checks", "matmul", "add", "sub", "mul",
    "neg", "tanh", "sigmoid", "relu", "exp", "log", "softmax", "log_softmax",
    "concat", "stack", "reshape", "transpose", "reduce_sum", "reduce_mean",
    "unfold2d", "grad_errors", "grad_check",
]

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _debug() -> bool:
    return getattr(_local, "debug", False)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph (inference, validation)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Raise NumericError as soon as any op produces a non-finite value."""
    prev = _debug()
    _local.debug = enabled
    try:
        yield
    finally:
        _local.debug = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------
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
    def is_leaf(self) -> bool:
        return self._backward is None and not self._consumed

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- differentiation ------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1 or self.ndim > 1:
            raise RankError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise DoubleBackwardError("graph already consumed by a previous backward()")
        order = _topological(self)
        for node in order:
            if node._consumed:
                raise DoubleBackwardError(f"graph node {node.op} already consumed")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
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
            node._backward = None
            node._parents = ()
            node._consumed = True


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _debug() and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out._consumed = False
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    if sa == sb or len(sa) == 0 or len(sb) == 0:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-dimension broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# --- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """``a @ b`` for a of shape (..., m, k) and b of shape (k, n) or (..., k, n)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# --- elementwise unary -------------------------------------------------------

def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    trace = getattr(_local, "kinks", None)
    if trace is not None:
        trace.append(active.tobytes())
    return _make(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


# --- normalizers -------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax.  ``mask`` (bool, same shape) excludes positions:
    they get probability exactly 0 and never influence the others."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {z.shape}")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward, "log_softmax")


# --- structural --------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ: {sorted(shapes)}")
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


def _getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype
    out = x.data[idx]
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True) if not basic else out, (x,), backward, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {orig} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]

    def backward(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis)), (x,), backward, "mean")


def unfold2d(x: Tensor, kh: int, kw: int, stride_h: int, stride_w: int) -> Tensor:
    """Extract valid (unpadded) strided patches from ``x`` of shape (B, H, W).

    Returns shape (B, j, l, kh*kw) with j = 1 + (H-kh)//stride_h and
    l = 1 + (W-kw)//stride_w; patch elements ordered row-major over (kh, kw).
    """
    if x.ndim != 3:
        raise ShapeError(f"unfold2d: expected (B, H, W), got {x.shape}")
    b, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"unfold2d: kernel {kh}x{kw} larger than input {h}x{w}")
    j = 1 + (h - kh) // stride_h
    l = 1 + (w - kw) // stride_w
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    patches = win[:, ::stride_h, ::stride_w][:, :j, :l].reshape(b, j, l, kh * kw)
    dtype = x.dtype

    def backward(g):
        g5 = g.reshape(b, j, l, kh, kw)
        full = np.zeros((b, h, w), dtype=dtype)
        he, we = stride_h * (j - 1) + 1, stride_w * (l - 1) + 1
        for a in range(kh):
            for c in range(kw):
                full[:, a:a + he:stride_h, c:c + we:stride_w] += g5[:, :, :, a, c]
        return (full,)

    return _make(patches, (x,), backward, "unfold2d")


# --- gradient checking -------------------------------------------------------

@contextlib.contextmanager
def _record_kinks():
    prev = getattr(_local, "kinks", None)
    _local.kinks = []
    try:
        yield _local.kinks
    finally:
        _local.kinks = prev


def grad_errors(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Iterable[Tensor],
                h: float = 1e-5, max_entries: int | None = None, seed: int = 0,
                skip_kinks: bool = True, resolve_tol: float | None = None,
                stats: dict | None = None) -> dict[str, float]:
    """Per-parameter max relative error between backprop and central differences.

    ``f`` re-evaluates the scalar objective from the current parameter values.
    With ``max_entries`` only that many randomly chosen coordinates of each
    parameter are perturbed (large layers).

    A central difference straddling a ReLU kink measures the average of two
    one-sided slopes, not the derivative.  With ``skip_kinks`` a coordinate is
    discarded (and another drawn) when any ReLU activation pattern at
    theta +/- h differs from the one at theta.

    Central differences carry roundoff of about eps*|f|/h.  With
    ``resolve_tol`` set, coordinates where both gradients are below
    eps*max(|f|, 1)/(h*resolve_tol) are also discarded, since no relative
    error under ``resolve_tol`` can be certified there.  ``stats`` (if given)
    receives per-parameter counts of checked and discarded coordinates.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise NumericError(f"grad check requires float64 parameters; {name} is {p.dtype}")
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.zero_grad()

    def evaluate() -> tuple[float, list]:
        with no_grad(), _record_kinks() as kinks:
            val = f().item()
        if not np.isfinite(val):
            raise EvaluationError(f"objective is non-finite: {val}")
        return val, kinks

    with _record_kinks() as base_kinks:
        loss = f()
    if not np.isfinite(loss.item()):
        raise EvaluationError(f"objective is non-finite: {loss.item()}")
    loss.backward()
    floor = 0.0
    if resolve_tol is not None:
        floor = np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / (h * resolve_tol)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        order = np.arange(flat.size)
        limit = flat.size
        if max_entries is not None and flat.size > max_entries:
            order = rng.permutation(flat.size)
            limit = max_entries
        worst, used, kinked, unresolved = 0.0, 0, 0, 0
        for attempt, i in enumerate(order):
            if used == limit or (limit < flat.size and attempt >= 20 * limit):
                break
            orig = flat[i]
            flat[i] = orig + h
            fp, kp = evaluate()
            flat[i] = orig - h
            fm, km = evaluate()
            flat[i] = orig
            if skip_kinks and (kp != base_kinks or km != base_kinks):
                kinked += 1
                continue
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            if max(abs(a), abs(numeric)) < floor:
                unresolved += 1
                continue
            used += 1
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
        if stats is not None:
            stats[name] = {"checked": used, "kinks": kinked, "unresolved": unresolved}
    return errors


def grad_check(f: Callable[[], Tensor], params, h: float = 1e-5,
               max_entries: int | None = None, seed: int = 0, skip_kinks: bool = True) -> float:
    """Max relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)."""
    return max(grad_errors(f, params, h=h, max_entries=max_entries, seed=seed, skip_kinks=skip_kinks).values())
