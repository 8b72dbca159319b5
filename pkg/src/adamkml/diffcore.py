"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds its output eagerly and attaches a closure that maps the
output gradient to gradients of its parents. ``backward`` walks the recorded
graph in reverse topological order and frees it afterwards.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvalidShapeError, NumericError

LEAKY_SLOPE = 0.2

# Set to False to skip the per-op finiteness scan in hot loops.
CHECK_FINITE = True


class Tensor:
    """n-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape).copy())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError("non-finite value produced by an operation")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    d = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * d, (a,), lambda g: (g * d,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def elementwise(op_kind: str, *args: Tensor) -> Tensor:
    """Dispatch by name: add, hadamard, leaky_relu, tanh, sigmoid, softplus."""
    table = {
        "add": add,
        "hadamard": hadamard,
        "leaky_relu": leaky_relu,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "softplus": softplus,
    }
    try:
        fn = table[op_kind]
    except KeyError:
        raise InvalidArgumentError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- shape / reductions

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise InvalidShapeError(f"cannot reshape {a.shape} to {shape}")
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def tsum(a: Tensor) -> Tensor:
    src = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise InvalidArgumentError("mean of an empty tensor")
    src = a.shape
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(src, float(g) / n),))


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` (numpy rules) to ``shape``; the gradient sums back."""
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise InvalidShapeError(f"cannot expand {src} to {shape}") from None
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src) if axes else g,)

    return _node(data, (a,), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select entries along axis 0."""
    idx = np.asarray(idx, dtype=np.intp)
    src = a.shape

    def bw(g):
        out = np.zeros(src)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), bw)


def assemble_rows(parts: Sequence[tuple[Tensor, Sequence[int]]], n_rows: int) -> Tensor:
    """Scatter row blocks into a fresh tensor of ``n_rows`` rows.

    Each part is ``(block, row_indices)``; the indices of all parts must
    partition ``range(n_rows)``.
    """
    parts = [(t, np.asarray(ix, dtype=np.intp)) for t, ix in parts if len(ix)]
    if not parts:
        raise InvalidArgumentError("assemble_rows needs at least one non-empty part")
    trailing = parts[0][0].shape[1:]
    covered = np.zeros(n_rows, dtype=np.int64)
    for t, ix in parts:
        if t.shape[1:] != trailing or t.shape[0] != len(ix):
            raise InvalidShapeError("assemble_rows: block shapes disagree")
        np.add.at(covered, ix, 1)
    if not (covered == 1).all():
        raise InvalidArgumentError("assemble_rows: indices must partition the rows")
    out = np.empty((n_rows,) + trailing)
    for t, ix in parts:
        out[ix] = t.data
    index_lists = [ix for _, ix in parts]
    return _node(out, tuple(t for t, _ in parts), lambda g: tuple(g[ix] for ix in index_lists))


# ---------------------------------------------------------------- linear algebra

def outer_product(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise InvalidShapeError("outer_product expects two rank-1 tensors")
    ad, bd = a.data, b.data
    return _node(np.outer(ad, bd), (a, b), lambda g: (g @ bd, ad @ g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ weight.T + bias with weight of shape [out, in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd.T
    if bias is None:
        return _node(y, (x, weight), lambda g: (g @ wd, g.T @ xd))
    if bias.shape != (weight.shape[0],):
        raise InvalidShapeError("linear: bias length must equal output dim")
    y = y + bias.data
    return _node(y, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, NCHW layout, loop over kernel taps."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise InvalidShapeError("conv2d expects input [N,C,H,W] and kernel [O,C,k,k]")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise InvalidShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise InvalidShapeError("conv2d: kernel larger than padded input")
    if bias is not None and bias.shape != (cout,):
        raise InvalidShapeError("conv2d: bias length must equal output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = kernel.data

    def tap(a, b):
        return xp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]

    acc = np.zeros((n, ho, wo, cout))
    for a in range(kh):
        for b in range(kw):
            acc += np.tensordot(tap(a, b), wd[:, :, a, b], axes=([1], [1]))
    out = acc.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gk = np.empty_like(wd)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for a in range(kh):
            for b in range(kw):
                gk[:, :, a, b] = np.tensordot(g, tap(a, b), axes=([0, 2, 3], [0, 2, 3]))
                if gxp is not None:
                    contrib = np.tensordot(g, wd[:, :, a, b], axes=([1], [0]))  # N,ho,wo,C
                    gxp[:, :, a:a + stride * (ho - 1) + 1:stride,
                        b:b + stride * (wo - 1) + 1:stride] += contrib.transpose(0, 3, 1, 2)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise InvalidShapeError("upsample2x expects NCHW")
    n, c, h, w = x.shape
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _node(y, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# ---------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of softplus(l) - t*l."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    t = np.broadcast_to(t, logits.shape) if np.ndim(t) == 0 else t
    if logits.data.size == 0:
        raise InvalidArgumentError("bce_with_logits on an empty batch")
    if t.shape != logits.shape:
        raise InvalidShapeError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise InvalidArgumentError("targets must be 0 or 1")
    x = logits.data
    n = x.size
    val = np.mean(np.logaddexp(0.0, x) - t * x)
    return _node(np.asarray(val), (logits,), lambda g: (float(g) * (_sigmoid(x) - t) / n,))


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None,
             free_graph: bool = True) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar loss.

    Leaf tensors with ``requires_grad`` get ``.grad`` overwritten. When
    ``params`` is given, the returned map has one entry per name, zero-filled
    for parameters the loss does not reach.
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    order = _topo(loss) if loss.requires_grad else []
    if order:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is None:
            node.grad = np.asarray(grads.get(id(node), np.zeros_like(node.data)), dtype=np.float64)
        elif free_graph:
            node._parents = ()
            node._backward = None
    if params is None:
        return {}
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64).reshape(p.shape)
    return out


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences."""
    if h <= 0:
        raise InvalidArgumentError("h must be positive")
    x0 = np.array(point, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite function value")
    analytic = backward(out, {"x": leaf})["x"].reshape(-1)
    numeric = np.empty(x0.size)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite value during finite differencing")
        numeric[i] = (fp - fm) / (2.0 * h)
    if flat.size == 0:
        return 0.0
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(err.max())

