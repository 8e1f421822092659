"""Dense row-major tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`GradTape` when at least one
input requires a gradient. Outside a tape nothing is recorded, so inference
forwards carry no bookkeeping cost.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "tensor",
    "parameter",
    "precision",
    "default_dtype",
    "matmul",
    "softmax_lastdim",
    "backward",
    "concat",
    "split",
    "take",
    "layer_norm",
    "gelu",
    "silu",
    "detach",
    "mse",
    "custom_op",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class NonFiniteError(ArithmeticError):
    """Raised when a forward operation produces NaN or Inf."""


_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def _active_tape() -> GradTape | None:
    return getattr(_state, "tape", None)


def _check_finite(data: np.ndarray, opname: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{opname} produced non-finite values")


class Tensor:
    """An n-dimensional real array, optionally tracked for gradients.

    ``data`` is a C-contiguous numpy array; ``shape`` mirrors it. Tensors are
    treated as immutable; the optimizer is the only code that writes into
    ``data`` in place.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else default_dtype()))
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the block whose inputs
    require gradients is appended. Execution order is a valid topological
    order, so :meth:`backward` simply replays the record in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self) -> GradTape:
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.nodes.append(_Node(out, inputs, backward_fn))

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        return backward(loss, self, wrt)


_MOVES = frozenset({"reshape", "transpose", "broadcast_to", "concat", "take", "split"})


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, opname: str) -> Tensor:
    """Wrap an op result and record it on the active tape if needed."""
    if opname not in _MOVES:
        # data movement cannot create non-finite values from finite inputs
        _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward_fn)
    else:
        out.requires_grad = False
    return out


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, opname: str = "custom") -> Tensor:
    """Register a user-defined differentiable op.

    ``backward_fn(grad_out)`` must return a tuple with one gradient array (or
    ``None``) per input, each shaped like that input.
    """
    return _make(data, inputs, backward_fn, opname)


def backward(loss: Tensor, tape: GradTape, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tracked leaf.

    Returns a dict keyed by leaf tensor. When ``wrt`` is given, each listed
    tensor gets an entry, zero-filled if it is not connected to the loss.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        produced.add(id(node.out))
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    out: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        if key in grads:
            out[leaf] = grads[key].reshape(leaf.shape)
    if wrt is not None:
        for t in wrt:
            if t not in out:
                out[t] = np.zeros_like(t.data)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        s = b
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul")
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight matrix: fold batch dims into one GEMM
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def bw2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw2, "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return _make(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat shapes incompatible: {[t.shape for t in xs]}") from None
    splits = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Cut ``x`` into consecutive pieces of the given extents along ``axis``."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = (slice(None),) * axis + (slice(int(lo), int(hi)),)

        def bw(g, sl=sl):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[sl] = g
            return (gx,)

        outs.append(_make(x.data[sl], (x,), bw, "split"))
    return outs


_DENSE_SCATTER_LIMIT = 1 << 22


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; ``indices`` may be any integer array shape."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take: indices out of range for axis of length {n}")
    src = x.shape

    def bw(g):
        flat = idx.reshape(-1)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        gm = gm.reshape((flat.size,) + gm.shape[idx.ndim:])
        if flat.size * n <= _DENSE_SCATTER_LIMIT:
            # scatter-add as a product with the transposed one-hot selection
            sel = np.zeros((n, flat.size), dtype=g.dtype)
            sel[flat, np.arange(flat.size)] = 1
            acc = np.tensordot(sel, gm, axes=(1, 0))
        else:
            acc = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
            np.add.at(acc, flat, gm)
        return (np.moveaxis(acc, 0, axis),)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw, "take")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w = weight.data if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gh = g * w if w is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gw = (g * xhat).sum(axis=lead) if weight is not None else None
        gb = g.sum(axis=lead) if bias is not None else None
        return gx, gw, gb

    present = (True, weight is not None, bias is not None)
    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)
    return _make(out, inputs, lambda g: tuple(gi for gi, p in zip(bw(g), present) if p), "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * (xd * xd))
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out, (x,), bw, "gelu")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    return _make(xd * sig, (x,), lambda g: (g * sig * (1.0 + xd * (1.0 - sig)),), "silu")


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.name = None
    return out


def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _make(out, (pred,), lambda g: (g * (2.0 / n) * diff,), "mse")
