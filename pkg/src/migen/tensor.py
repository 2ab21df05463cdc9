"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output remembers its parents and a closure mapping the output
gradient to one gradient per parent. :meth:`Tensor.backward` walks the graph
once in reverse topological order, summing contributions for tensors that
feed several consumers.

Shape mixing is deliberately narrow: elementwise binary ops need equal
shapes, except that a 1-D right operand matching the last axis is added as a
bias. Anything else raises :class:`~migen.errors.ShapeError`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, params: Iterable["Tensor"] | None = None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``params``, when given, are guaranteed a gradient array afterwards
        (zeros for parameters the loss does not depend on).
        """
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if params is not None:
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return take_rows(self, rows)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _topological(root: Tensor) -> list[Tensor]:
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


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def _is_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1] and a.shape != b.shape


def _reduce_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._make(a.data + c, (a,), lambda g: (g,), "add_scalar")
    a = _as_tensor(a)
    if a.shape == b.shape:
        return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if _is_bias(a, b):
        return Tensor._make(a.data + b.data, (a, b), lambda g: (g, _reduce_bias(g)), "add_bias")
    raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    if a.shape != b.shape:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if a.shape == b.shape:
        ad, bd = a.data, b.data
        return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    if _is_bias(a, b):
        ad, bd = a.data, b.data
        return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, _reduce_bias(g * ad)), "mul_bias")
    raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant.

    ``mask`` is a constant boolean array broadcastable to ``a`` (e.g. a
    (T, T) causal mask over a (B, heads, T, T) score tensor).
    """
    mask = np.asarray(mask, dtype=bool)
    keep = ~np.broadcast_to(mask, a.shape)
    out = np.where(keep, a.data, value)
    return Tensor._make(out, (a,), lambda g: (g * keep,), "masked_fill")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor._make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ----------------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return Tensor._make(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def add_n(xs: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"add_n operands disagree: {shape} vs {x.shape}")
    out = xs[0].data.copy()
    for x in xs[1:]:
        out += x.data
    return Tensor._make(out, tuple(xs), lambda g: tuple(g for _ in xs), "add_n")


# ----------------------------------------------------------------------------
# linear algebra and shape plumbing
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across any leading axes of ``a``) or has
    exactly the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    if bd.ndim == 2:
        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def backward(g):
            return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g
    return Tensor._make(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                        lambda g: (g.transpose(inv),), "transpose")


def take_rows(a: Tensor, index) -> Tensor:
    """Index along the first axis (int, slice, or integer array)."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        if isinstance(index, slice):
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)
    return Tensor._make(a.data[index], (a,), backward, "take_rows")


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)
    return Tensor._make(table.data[ids], (table,), backward, "embedding")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return Tensor._make(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def expand_batch(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return Tensor._make(out, (a,), lambda g: (g.sum(axis=0),), "expand_batch")


# ----------------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return Tensor._make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"log_softmax axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Tensor._make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_bias(g * xhat), _reduce_bias(g)
    return Tensor._make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

def conv2d_same(x: Tensor, weight: Tensor, bias: Tensor, depthwise: bool = True) -> Tensor:
    """Zero-padded 2-D cross-correlation on an (H, W, C) grid.

    Depthwise weights are (k, k, C); full weights are (k, k, C, C). The
    output keeps the spatial shape and channel count of the input.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv2d_same expects an (H, W, C) grid, got {x.shape}")
    k = weight.shape[0]
    if weight.shape[1] != k or k % 2 == 0:
        raise ConfigError(f"conv kernel must be square with an odd side, got {weight.shape[:2]}")
    C = x.shape[2]
    want = (k, k, C) if depthwise else (k, k, C, C)
    if weight.shape != want or bias.shape != (C,):
        raise ShapeError(f"conv weight {weight.shape}/bias {bias.shape} incompatible with input {x.shape}")
    xd, wd = x.data, weight.data
    if depthwise:
        out = kernels.dwconv_forward(xd, wd, bias.data)
        return Tensor._make(out, (x, weight, bias), lambda g: kernels.dwconv_backward(xd, wd, g), "dwconv")
    out = kernels.conv_forward(xd, wd, bias.data)
    return Tensor._make(out, (x, weight, bias), lambda g: kernels.conv_backward(xd, wd, g), "conv")


# ----------------------------------------------------------------------------
# verification
# ----------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``x`` is a Tensor or a sequence of Tensors that ``f`` closes over or
    receives. The error for each coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(x)) if isinstance(x, Tensor) else (lambda: f(*xs))
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = call()
    loss.backward(params=xs)
    analytic = [t.grad.copy() for t in xs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = call().item()
                flat[i] = orig - h
                fm = call().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]))
                worst = max(worst, err)
    return worst
