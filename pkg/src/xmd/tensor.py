"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure; ``backward`` walks the
graph once in reverse topological order. Broadcasting is deliberately narrow:
operands must have equal shapes, or one operand must be a scalar or match the
trailing axes of the other.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "GradCheckError",
    "Tensor",
    "no_grad",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "take",
    "relu",
    "layer_norm",
    "log_softmax",
    "softmax",
    "masked_sum",
    "tensor_sum",
    "reshape",
    "transpose",
    "narrow",
    "concat",
    "backward",
    "GradCheckReport",
    "grad_check",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes do not conform for the named operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradCheckError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def tensor(data, requires_grad: bool = True, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, back) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = back
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _broadcast_kind(op: str, a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1 and b.data.ndim == 1:
        return "b_scalar"
    if a.data.size == 1 and a.data.ndim == 1:
        return "a_scalar"
    if b.data.ndim < a.data.ndim and a.shape[a.data.ndim - b.data.ndim:] == b.shape:
        return "b_trailing"
    if a.data.ndim < b.data.ndim and b.shape[b.data.ndim - a.data.ndim:] == a.shape:
        return "a_trailing"
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == (1,):
        return np.array([g.sum()])
    return g.reshape((-1,) + shape).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_kind("add", a, b)

    def back(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, _reduce_to(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", back)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_kind("sub", a, b)

    def back(g):
        _accum(a, _reduce_to(g, a.shape))
        _accum(b, -_reduce_to(g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", back)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_kind("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * bd, a.shape))
        if b.requires_grad:
            _accum(b, _reduce_to(g * ad, b.shape))

    return _node(ad * bd, (a, b), "mul", back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), "scale", back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m), or batched with identical leading axes."""
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="leading axes differ")
    shared = bd.ndim == 2

    def back(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if shared:
                k, m = bd.shape
                _accum(b, ad.reshape(-1, k).T @ g.reshape(-1, m))
            else:
                _accum(b, np.swapaxes(ad, -1, -2) @ g)

    return _node(ad @ bd, (a, b), "matmul", back)


def take(table: Tensor, ids) -> Tensor:
    """Row gather: ``out[..., :] = table[ids[...], :]``."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError("take", table.shape, detail="table must be 2-D")
    if ids.dtype.kind not in "iu":
        raise TypeError(f"take: ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids.max() if ids.max() >= n else ids.min())
        raise IndexError(f"take: id {bad} out of range for table with {n} rows")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _node(table.data[ids], (table,), "take", back)


def relu(x: Tensor) -> Tensor:
    gate = x.data > 0

    def back(g):
        _accum(x, g * gate)

    return _node(np.where(gate, x.data, 0.0), (x,), "relu", back)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional affine gain and bias."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    parents = [x]
    if gain is not None:
        if gain.shape != (d,):
            raise ShapeError("layer_norm", x.shape, gain.shape, detail="gain")
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        if bias.shape != (d,):
            raise ShapeError("layer_norm", x.shape, bias.shape, detail="bias")
        out = out + bias.data
        parents.append(bias)

    def back(g):
        if gain is not None:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
            gh = g * gain.data
        else:
            gh = g
        if bias is not None:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accum(x, gx)

    return _node(out, parents, "layer_norm", back)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def log_softmax(x: Tensor) -> Tensor:
    out = _log_softmax_np(x.data)
    p = np.exp(out)

    def back(g):
        _accum(x, g - p * g.sum(axis=-1, keepdims=True))

    return _node(out, (x,), "log_softmax", back)


def softmax(x: Tensor) -> Tensor:
    p = np.exp(_log_softmax_np(x.data))

    def back(g):
        _accum(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (x,), "softmax", back)


def masked_sum(x: Tensor, mask) -> Tensor:
    """Sum of ``x * mask``; mask covers the leading axes of ``x`` (or all of them)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[: m.ndim]:
        raise ShapeError("masked_sum", x.shape, m.shape, detail="mask must cover leading axes")
    m = m.reshape(m.shape + (1,) * (x.data.ndim - m.ndim))

    def back(g):
        _accum(x, np.broadcast_to(g[0] * m, x.shape))

    return _node(np.array([(x.data * m).sum()]), (x,), "masked_sum", back)


def tensor_sum(x: Tensor) -> Tensor:
    def back(g):
        _accum(x, np.full(x.shape, g[0]))

    return _node(np.array([x.data.sum()]), (x,), "sum", back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None

    def back(g):
        _accum(x, g.reshape(old))

    return _node(out, (x,), "reshape", back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        _accum(x, np.transpose(g, inv))

    return _node(np.transpose(x.data, axes), (x,), "transpose", back)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    axis = axis % x.data.ndim
    if not 0 <= start <= stop <= x.shape[axis]:
        raise ShapeError("narrow", x.shape, detail=f"range [{start}, {stop}) on axis {axis}")
    index = (slice(None),) * axis + (slice(start, stop),)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        _accum(x, full)

    return _node(x.data[index], (x,), "narrow", back)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [constant(t) for t in xs]
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in xs)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        for t, piece in zip(xs, np.split(g, bounds, axis=axis)):
            _accum(t, piece)

    return _node(out, xs, "concat", back)


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Fill ``.grad`` on every leaf reachable from a scalar ``root``.

    Returns a map from each differentiable leaf to its gradient. Gradients of
    intermediate nodes are released after use.
    """
    if root.data.size != 1:
        raise ShapeError("backward", root.shape, detail="root must be a scalar")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node._backward is not None:
            if node.grad is not None:
                node._backward(node.grad)
            node.grad = None
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            leaves[node] = node.grad
    return leaves


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    epsilon: float
    checked: int
    worst: tuple[int, int] | None = None  # (tensor index, flat coordinate)
    errors: list[float] = field(default_factory=list)
    floor: float = 1e-8
    below_floor: int = 0  # coordinates where both gradients are under ``floor``

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(loss_fn: Callable[[], Tensor], params: Tensor | Iterable[Tensor],
               epsilon: float = 1e-5, tolerance: float = 1e-5,
               n_samples: int | None = None, seed: int = 0,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``loss_fn`` must rebuild the graph from the current values of ``params``
    each call. Coordinates are perturbed in place and restored. When
    ``n_samples`` is given, that many coordinates are drawn uniformly (without
    replacement) across all tensors; otherwise every coordinate is checked.
    Relative error uses ``max(|a|, |b|, floor)`` as denominator. Float64
    roundoff in the loss difference is about 1e-16 * |loss| / epsilon, so for
    gradients near that size the ratio measures noise; a larger ``floor``
    compares those coordinates absolutely.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    plist = [params] if isinstance(params, Tensor) else list(params)
    root = loss_fn()
    grads = backward(root)
    analytic = [grads.get(p, np.zeros_like(p.data)).copy() for p in plist]

    coords = [(i, j) for i, p in enumerate(plist) for j in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=n_samples, replace=False))
        coords = [coords[k] for k in pick]

    errors = []
    below = 0
    worst, worst_err = None, -1.0
    for i, j in coords:
        flat = plist[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        fp = loss_fn().item()
        flat[j] = orig - epsilon
        fm = loss_fn().item()
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCheckError(f"non-finite loss when perturbing tensor {i} coordinate {j}")
        numeric = (fp - fm) / (2.0 * epsilon)
        a = analytic[i].reshape(-1)[j]
        below += max(abs(a), abs(numeric)) < floor
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        errors.append(err)
        if err > worst_err:
            worst, worst_err = (i, j), err
    return GradCheckReport(max_rel_error=max(errors, default=0.0), tolerance=tolerance,
                           epsilon=epsilon, checked=len(coords), worst=worst, errors=errors,
                           floor=floor, below_floor=int(below))
