"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the primitives the network needs are provided. Broadcasting is limited to
scalars and leading batch dimensions (the smaller operand's shape must be a
suffix of the larger one); anything else needs an explicit reshape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(Tape.from_root(self).nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Nodes reachable from a root, parents before children."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_broadcast(a: tuple, b: tuple, op: str):
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b} (only leading-batch broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)), "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _node(ad ** exponent, (a,),
                 lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of non-positive value")
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return _node(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


# ---- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (out,)

    return _node(np.take(a.data, idx, axis=axis), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from exc
    return _node(out, tuple(tensors), backward, "concat")


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    return concat([reshape(t, (1, -1)) for t in tensors], axis=0)


# ---- reductions -------------------------------------------------------------

def _axis_size(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    return shape[axis]


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = _axis_size(a.shape, axis)
    if n == 0:
        raise DomainError(f"mean over an empty axis (shape {a.shape}, axis {axis})")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape and x.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if x.shape and x.shape[axis] == 0:
        raise DomainError("log_softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine."""
    x = a.data
    n = x.shape[-1] if x.ndim else 0
    if n == 0:
        raise DomainError("layer_norm over an empty axis")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.mean(axis=-1, keepdims=True)),)

    out = _node(xhat, (a,), backward, "layer_norm")
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x / denom

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * dot) / denom,)

    return _node(out, (a,), backward, "l2_normalize")


# ---- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError(f"matmul: only the left operand may carry extra batch dims, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        if gb.ndim > bd.ndim:
            gb = gb.reshape(-1, *bd.shape).sum(axis=0)
        return ga, gb

    return _node(ad @ bd, (a, b), backward, "matmul")


# ---- losses -----------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    if logits.shape[0] == 0:
        raise DomainError("cross_entropy over zero rows")
    lp = log_softmax(logits, axis=-1)
    picked = take(reshape(lp, (-1,)), np.arange(len(t)) * logits.shape[1] + t)
    return mul(sum(picked), -1.0 / len(t))


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    if d.data.size == 0:
        raise DomainError("mse over an empty array")
    return mean(mul(d, d))


# ---- gradient checking ------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is |a - n| / max(|a|, |n|, floor). Below ``floor``
    the comparison is effectively absolute; this keeps gradients that are zero
    by construction (where the difference quotient is pure roundoff) from
    reading as large relative errors. ``max_coords`` caps the number of
    coordinates probed per input (sampled with ``seed``); ``None`` probes every
    coordinate.
    """
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite function value at the probe point")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for x in inputs:
            analytic = np.zeros_like(x.data) if x.grad is None else x.grad
            flat = x.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError(f"non-finite value while perturbing coordinate {i}")
                numeric = (fp - fm) / (2.0 * eps)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst


def topological_nodes(root: Tensor) -> list:
    return Tape.from_root(root).nodes


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
