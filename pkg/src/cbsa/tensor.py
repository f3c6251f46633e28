"""Dense float64 tensors with a reverse-mode gradient tape.

Operations only record onto a :class:`Tape` when one is active (``with Tape()``)
and at least one input requires a gradient. Without an active tape every op is
a plain forward evaluation, which is what scoring and evaluation code relies on.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "DomainError",
    "DegenerateRowError",
    "ContractError",
    "tensor",
    "parameter",
    "backward",
    "no_grad",
    "detach",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "log",
    "exp",
    "power",
    "gelu",
    "clamp",
    "softmax",
    "softmax_rows",
    "l2_normalize",
    "l2_normalize_rows",
    "layer_norm",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "elementwise",
]

NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an op."""


class DegenerateRowError(ValueError):
    """A row is too close to zero to be normalized."""


class ContractError(RuntimeError):
    """A caller violated an API precondition (e.g. non-scalar backward root)."""


_TAPES: list[Optional["Tape"]] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPES[-1] if _TAPES else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self) -> None:
        _TAPES.append(None)

    def __exit__(self, *exc) -> None:
        _TAPES.pop()


def detach(x: "Tensor") -> "Tensor":
    return Tensor(x.data)


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended in creation order, so parents always precede children
    and a reverse sweep is a valid topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.grads: dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def record(self, node: "Tensor") -> None:
        node._tape_index = len(self.nodes)
        self.nodes.append(node)

    def grad(self, node: "Tensor") -> np.ndarray:
        return self.grads[id(node)]

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        return backward(self, root)


class Tensor:
    """Row-major float64 array plus autodiff bookkeeping."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str = "") -> None:
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"
        self._tape_index = -1

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, gamma):
        return power(self, gamma)

    def __getitem__(self, idx):
        return _index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _scalar_error(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out._op = op
    out._tape_index = -1
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        tape.record(out)
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``root``.

    Fills ``tape.grads`` for every reachable node and accumulates into ``.grad``
    of reachable leaves that require a gradient. Returns ``tape.grads``.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    tape.grads = grads
    if not root.requires_grad:
        return grads
    start = root._tape_index
    if start < 0 or start >= len(tape.nodes) or tape.nodes[start] is not root:
        raise ContractError("backward root was not recorded on this tape")
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: start + 1]):
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        leaf.grad = grads[key] if leaf.grad is None else leaf.grad + grads[key]
    return grads


# --------------------------------------------------------------------------
# binary ops
# --------------------------------------------------------------------------


def _binary(fn, a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(_binary(np.add, a, b, "add"), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(_binary(np.subtract, a, b, "sub"), (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = _binary(np.multiply, a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = _binary(np.divide, a, b, "div")

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), bw, "div")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


# --------------------------------------------------------------------------
# unary ops
# --------------------------------------------------------------------------


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    # split branches so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        bad = float(d[d <= 0].min()) if np.any(d <= 0) else float("nan")
        raise DomainError(f"log: operand must be positive and finite (min offending value {bad})")
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def power(x, gamma: float) -> Tensor:
    """``x ** gamma`` for a constant exponent and ``x >= 0``."""
    x = _as_tensor(x)
    gamma = float(gamma)
    d = x.data
    if np.any(d < 0):
        raise DomainError(f"pow: base must be non-negative (min {float(d.min())})")
    out = np.power(d, gamma)

    def bw(g):
        if gamma == 0.0:
            return (np.zeros_like(d),)
        if gamma == 1.0:
            return (g,)
        with np.errstate(divide="ignore", invalid="ignore"):
            local = gamma * np.power(d, gamma - 1.0)
        # x**gamma with 0 < gamma < 1 has an unbounded slope at 0; report 0 there
        local = np.where(np.isfinite(local), local, 0.0)
        return (g * local,)

    return _make(out, (x,), bw, "pow")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU (smooth, so finite-difference checks stay clean)."""
    x = _as_tensor(x)
    d = x.data
    d2 = d * d
    inner = _GELU_C * d * (1.0 + 0.044715 * d2)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th**2) * dinner),)

    return _make(out, (x,), bw, "gelu")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    x = _as_tensor(x)
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _make(np.clip(d, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    if not temperature > 0:
        raise DomainError(f"softmax: temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (x,), bw, "softmax")


def softmax_rows(x, temperature: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1, temperature=temperature)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    norm = np.sqrt((d * d).sum(axis=axis, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateRowError(f"l2_normalize: row norm below {NORM_EPS:g}")
    out = d / norm

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - out * inner) / norm,)

    return _make(out, (x,), bw, "l2_normalize")


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.shape[-1] < 2:
        raise DimensionError(f"layer_norm needs width >= 2, got {x.shape}")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    d = x.data
    xc = d - d.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (
            dx if x.requires_grad else None,
            (g * xhat).sum(axis=lead) if gain.requires_grad else None,
            g.sum(axis=lead) if bias.requires_grad else None,
        )

    return _make(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def l2_normalize_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got shape {x.shape}")
    return l2_normalize(x, axis=-1)


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def _index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(x.data[idx]), (x,), bw, "index")


def take_rows(x, rows) -> Tensor:
    """Gather ``x[rows]`` along axis 0 (rows may repeat)."""
    return _index(_as_tensor(x), np.asarray(rows, dtype=np.int64))


_UNARY = {"sigmoid": sigmoid, "log": log, "negate": neg, "exp": exp}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args, gamma: Optional[float] = None) -> Tensor:
    """Name-dispatched elementwise op: add, sub, mul, sigmoid, log, pow, negate."""
    if op in _BINARY:
        a, b = (_as_tensor(t) for t in args)
        if a.shape != b.shape:
            raise DimensionError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if op in _UNARY:
        (a,) = args
        return _UNARY[op](a)
    if op == "pow":
        if gamma is None:
            (a, gamma) = args
        else:
            (a,) = args
        return power(a, gamma)
    raise ValueError(f"unknown elementwise op {op!r}")
