"""Dense float64 tensors with a dynamic reverse-mode autodiff tape.

Every op produces a new ``Tensor``. When any input requires grad (and grad
mode is on) the output remembers its parents and a backward rule; calling
:func:`backward` on a scalar builds a :class:`Tape` in topological order,
replays it once, deposits gradients on the leaves and frees the graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "zeros",
    "ones",
    "record",
    "elementwise",
    "reduce",
    "matmul",
    "reshape",
    "permute",
    "transpose",
    "grid_to_seq",
    "seq_to_grid",
    "getitem",
    "pad",
    "roll",
    "concat",
    "relu",
    "gelu",
    "tanh",
    "softmax",
    "log_softmax",
    "conv2d",
    "layer_norm",
    "backward",
    "make_rng",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DomainError(ArithmeticError):
    """Input outside an op's numeric domain (division by zero, log of <= 0...)."""


class NonFiniteError(ArithmeticError):
    """An op produced or received NaN/Inf."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (teacher forwards, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A row-major float64 array plus optional autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        # Internal fast path: arr is freshly computed and owned by the result.
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        # ascontiguousarray would promote 0-d results to shape (1,)
        t.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("add", elementwise("neg", self), other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axes=None, keepdims: bool = False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only re-check on the rare overflow
    if not math.isfinite(float(arr.sum())) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced NaN or Inf")


def record(out: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap ``out`` as a Tensor and, if needed, attach it to the graph.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent, each shaped like that parent. Ops defined outside this module
    (the FFT in :mod:`uhkd.spectral`) go through here too.
    """
    _check_finite(out, op)
    t = Tensor._wrap(out)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
        t._op = op
    return t


# ---------------------------------------------------------------------------
# broadcasting


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    # One-sided broadcasting only: the result takes one operand's shape.
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a} with {b}") from None
    if out != a and out != b:
        raise ShapeError(f"{op}: mutual broadcasting of {a} and {b} is not supported")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise

_UNARY = {"neg", "exp", "log", "sqrt", "square", "abs"}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(tag: str, a, b=None) -> Tensor:
    """Pointwise op selected by ``tag``.

    Binary tags: add, sub, mul, div (``b`` a Tensor of equal or
    broadcastable shape, or a Python scalar). Unary tags: neg, exp, log,
    sqrt, square, abs.
    """
    a = _as_tensor(a)
    x = a.data
    if tag in _UNARY:
        if b is not None:
            raise TypeError(f"{tag} is unary")
        if tag == "neg":
            return record(-x, (a,), lambda g: (-g,), tag)
        if tag == "exp":
            with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
                out = np.exp(x)
            return record(out, (a,), lambda g: (g * out,), tag)
        if tag == "log":
            if (x <= 0).any():
                raise DomainError("log of a non-positive value")
            return record(np.log(x), (a,), lambda g: (g / x,), tag)
        if tag == "sqrt":
            if (x < 0).any():
                raise DomainError("sqrt of a negative value")
            out = np.sqrt(x)

            def _sqrt_bw(g):
                with np.errstate(divide="ignore"):
                    d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
                return (g * d,)

            return record(out, (a,), _sqrt_bw, tag)
        if tag == "square":
            return record(x * x, (a,), lambda g: (2.0 * g * x,), tag)
        if tag == "abs":
            return record(np.abs(x), (a,), lambda g: (g * np.sign(x),), tag)
    if tag not in _BINARY:
        raise ValueError(f"unknown elementwise tag {tag!r}")
    if b is None:
        raise TypeError(f"{tag} needs two operands")

    if not isinstance(b, Tensor):
        s = float(b)
        if tag == "add":
            return record(x + s, (a,), lambda g: (g,), tag)
        if tag == "sub":
            return record(x - s, (a,), lambda g: (g,), tag)
        if tag == "mul":
            return record(x * s, (a,), lambda g: (g * s,), tag)
        if s == 0.0:
            raise DomainError("division by zero")
        return record(x / s, (a,), lambda g: (g / s,), tag)

    y = b.data
    _broadcast_shape(x.shape, y.shape, tag)
    sa, sb = x.shape, y.shape
    if tag == "add":
        return record(x + y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), tag)
    if tag == "sub":
        return record(x - y, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), tag)
    if tag == "mul":
        return record(
            x * y, (a, b), lambda g: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)), tag
        )
    if (y == 0).any():
        raise DomainError("division by zero")
    out = x / y
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / y, sa), _unbroadcast(-g * out / y, sb)),
        tag,
    )


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(tag: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when None)."""
    x = a.data
    ax = _norm_axes(axes, x.ndim)
    kept_shape = tuple(1 if i in ax else d for i, d in enumerate(x.shape))

    if tag == "sum":
        out = x.sum(axis=ax, keepdims=keepdims)

        def _bw(g):
            return (np.broadcast_to(g.reshape(kept_shape), x.shape).copy(),)

    elif tag == "mean":
        count = 1
        for i in ax:
            count *= x.shape[i]
        out = x.mean(axis=ax, keepdims=keepdims)

        def _bw(g):
            return (np.broadcast_to(g.reshape(kept_shape) / count, x.shape).copy(),)

    elif tag == "max":
        out = x.max(axis=ax, keepdims=keepdims)

        def _bw(g):
            m = out.reshape(kept_shape)
            hit = (x == m).astype(np.float64)
            # ties share the gradient evenly
            hit /= hit.sum(axis=ax, keepdims=True)
            return (hit * g.reshape(kept_shape),)

    else:
        raise ValueError(f"unknown reduce tag {tag!r}")
    return record(np.asarray(out, dtype=np.float64), (a,), _bw, tag)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched contraction ``[..., m, k] @ [..., k, n]``."""
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {x.shape} and {y.shape}")
    try:
        np.broadcast_shapes(x.shape[:-2], y.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents of {x.shape} and {y.shape} differ") from None
    out = np.matmul(x, y)
    sa, sb = x.shape, y.shape

    def _bw(g):
        if y.ndim == 2 and x.ndim > 2:
            # shared weight: fold the batch axes into the contraction
            gb = x.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), sb)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), sa)
        return ga, gb

    return record(out, (a, b), _bw, "matmul")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size or any(s <= 0 for s in shape):
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    src = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"{axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(a: Tensor, ax1: int = -2, ax2: int = -1) -> Tensor:
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return permute(a, axes)


def grid_to_seq(a: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C); token ``h*W + w`` holds the channel vector."""
    if a.ndim != 4:
        raise ShapeError(f"GRID tensor must be rank 4, got shape {a.shape}")
    b, c, h, w = a.shape
    return reshape(permute(a, (0, 2, 3, 1)), (b, h * w, c))


def seq_to_grid(a: Tensor, h: int, w: int) -> Tensor:
    if a.ndim != 3 or a.shape[1] != h * w:
        raise ShapeError(f"cannot unflatten {a.shape} into a {h}x{w} grid")
    b, _, c = a.shape
    return permute(reshape(a, (b, h, w, c)), (0, 3, 1, 2))


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for i in idx:
        if not (isinstance(i, (int, slice, np.integer)) or i is Ellipsis or i is None):
            raise TypeError("only basic indexing is supported")
    out = a.data[idx]
    src = a.shape

    def _bw(g):
        full = np.zeros(src)
        full[idx] += g
        return (full,)

    return record(np.array(out), (a,), _bw, "getitem")


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad needs {a.ndim} width pairs, got {len(widths)}")
    out = np.pad(a.data, widths)
    sl = tuple(slice(lo, lo + d) for (lo, _), d in zip(widths, a.shape))
    return record(out, (a,), lambda g: (g[sl],), "pad")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(ax) for ax in axes)
    out = np.roll(a.data, shifts, axes)
    back = tuple(-s for s in shifts)
    return record(out, (a,), lambda g: (np.roll(g, back, axes),), "roll")


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, parts, _bw, "concat")


# ---------------------------------------------------------------------------
# activations and fused ops


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return record(np.where(mask, x, 0.0), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def _bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return record(out, (a,), _bw, "gelu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (a,), _bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Log-sum-exp stabilised log-softmax."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def _bw(g):
        s = np.exp(out)
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), _bw, "log_softmax")


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Standardise over the last axis, then optional per-channel affine."""
    x = a.data
    d = x.shape[-1]
    for p, name in ((gamma, "gamma"), (beta, "beta")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {name} must have shape ({d},), got {p.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(p for p in (a, gamma, beta) if p is not None)

    def _bw(g):
        lead = tuple(range(g.ndim - 1))
        gh = g * gamma.data if gamma is not None else g
        ga = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [ga]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return record(out, parents, _bw, "layer_norm")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, oh, ow, c, kh, kw),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(b * oh * ow, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. x: (B, Cin, H, W); w: (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    b, cin, hp, wp = xd.shape
    cout, _, kh, kw = w.shape
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = _im2col(np.ascontiguousarray(xd), kh, kw, stride)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)

    parents = (x, w) if bias is None else (x, w, bias)
    xshape = x.shape

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = (g2 @ wmat).reshape(b, oh, ow, cin, kh, kw)
        gx = np.zeros((b, cin, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding : padding + xshape[2], padding : padding + xshape[3]]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record(out, parents, _bw, "conv2d")


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Recorded ops reachable from one output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def build(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def is_topological(self) -> bool:
        pos = {id(n): i for i, n in enumerate(self.nodes)}
        for i, n in enumerate(self.nodes):
            for p in n._parents:
                if id(p) in pos and pos[id(p)] >= i:
                    return False
        return len(pos) == len(self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.size != 1 or loss.ndim != 0 and loss.shape != (1,):
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.build(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = Tensor._wrap(g.copy())
            else:
                node.grad = Tensor._wrap(node.grad.data + g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=np.float64)
    for node in tape.nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.data**2).sum())
    return math.sqrt(total)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 stream keyed by (seed, *keys); all initialisation draws from these."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))
