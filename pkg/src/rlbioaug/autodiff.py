"""Dense float64 tensors with reverse-mode differentiation over a fixed primitive set.

Every primitive is eager: it computes its output immediately and records a
closure that maps the output adjoint to the input adjoints.  ``backward``
orders the recorded nodes topologically and runs the closures in reverse.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive."""


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GradientError(RuntimeError):
    """Misuse of the backward pass (non-scalar loss, repeated backward, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # operator sugar; each maps onto a primitive below
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap an array without copying; the result never requires grad."""
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=np.float64)
    t.requires_grad = False
    t.grad = None
    t.name = None
    t._parents = ()
    t._backward = None
    t._op = "leaf"
    t._consumed = False
    return t


def frozen(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Non-differentiable views of ``params`` (shared storage)."""
    return {k: constant(v.data) for k, v in params.items()}


def _check_finite(op: str, out: np.ndarray) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op}: non-finite value in output of shape {out.shape}")


def _make(op: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, out)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = any(p.requires_grad for p in parents)
    t.grad = None
    t.name = None
    t._op = op
    t._consumed = False
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward_fn
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError(f"log: non-positive input in tensor of shape {a.shape}")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


# ---------------------------------------------------------------------------
# reductions and normalizations


def _norm_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    if axis is None:
        out = np.asarray(a.data.sum())
        return _make("sum", out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    ax = _norm_axis("sum", axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), back)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[_norm_axis("mean", axis, a.ndim)]
    s = sum(a, axis=axis, keepdims=keepdims)
    out = scale(s, 1.0 / n)
    out._op = "mean"
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis("softmax", axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make("softmax", s, (a,), back)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine part)."""
    a = as_tensor(a)
    ax = _norm_axis("layer_norm", axis, a.ndim)
    mu = a.data.mean(axis=ax, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=ax, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=ax, keepdims=True)
        gy = (g * y).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make("layer_norm", y, (a,), back)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide each slice along ``axis`` by max(||x||, eps)."""
    a = as_tensor(a)
    ax = _norm_axis("l2_normalize", axis, a.ndim)
    norm = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    floored = norm < eps
    denom = np.where(floored, eps, norm)
    y = a.data / denom

    def back(g):
        proj = (g * y).sum(axis=ax, keepdims=True)
        return (np.where(floored, g / denom, (g - y * proj) / denom),)

    return _make("l2_normalize", y, (a,), back)


# ---------------------------------------------------------------------------
# structural


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need rank >= 2, batch dims broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), back)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = np.argsort([ax % a.ndim for ax in axes])
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    ax = _norm_axis("concat", axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make("concat", out, ts, back)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be rank 2, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding", table.data[ids], (table,), back)


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """x: (B, C_in, L), w: (C_out, C_in, k) -> (B, C_out, L_out); zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv1d: invalid stride={stride} padding={padding}")
    k = w.shape[2]
    length = x.shape[2] + 2 * padding
    if length < k:
        raise ShapeError(f"conv1d: padded input {x.shape} shorter than kernel {w.shape}")
    n_out = (length - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    b, c = x.shape[0], x.shape[1]
    n_co = w.shape[0]
    # im2col: one (B*L_out, C_in*k) @ (C_in*k, C_out) product
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    cols = windows.transpose(0, 2, 1, 3).reshape(b * n_out, c * k)
    wm = w.data.reshape(n_co, c * k)
    out = (cols @ wm.T).reshape(b, n_out, n_co).transpose(0, 2, 1)
    span = stride * (n_out - 1) + 1

    def back(g):
        g2 = g.transpose(0, 2, 1).reshape(b * n_out, n_co)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = np.matmul(wm.T, g).reshape(b, c, k, n_out)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + span:stride] += gcols[:, :, j]
        gx = gxp[:, :, padding:padding + x.shape[2]] if padding else gxp
        return (gx, gw)

    return _make("conv1d", out, (x, w), back)


# ---------------------------------------------------------------------------
# graph and backward pass


class Graph:
    """Topologically ordered nodes reachable from a loss, plus their adjoints."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.nodes = _toposort(loss)
        self.adjoints: dict[int, np.ndarray] = {}

    def grad(self, t: Tensor) -> np.ndarray | None:
        return self.adjoints.get(id(t))


def _toposort(root: Tensor) -> list[Tensor]:
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


def evaluate(fn: Callable[..., Tensor], inputs: Mapping[str, object]) -> Tensor:
    """Run ``fn`` on named inputs, coercing arrays to tensors."""
    bound = {k: as_tensor(v) for k, v in inputs.items()}
    out = fn(**bound)
    if not isinstance(out, Tensor):
        raise TypeError(f"evaluate: function returned {type(out).__name__}, expected Tensor")
    return out


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.data.size != 1:
        raise GradientError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("backward: loss does not depend on any tensor with requires_grad")
    if loss._consumed:
        raise GradientError("backward: already run on this graph; rebuild the forward pass")
    graph = Graph(loss)
    adj = graph.adjoints
    adj[id(loss)] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = adj.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adj.get(id(parent))
            adj[id(parent)] = pg if prev is None else prev + pg
    loss._consumed = True
    return graph


def zero_grad(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None], lr: float) -> dict[str, Tensor]:
    """In-place ``p -= lr * g``; missing gradients leave the parameter untouched."""
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"sgd_step: learning rate must be finite and >= 0, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: parameter {name!r} has shape {p.shape}, gradient {g.shape}")
        p.data = p.data - lr * g
    return dict(params)
