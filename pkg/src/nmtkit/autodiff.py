"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded when at least one input is already on that tape.  Leaves enter
the tape through :meth:`Tape.watch`.  Everything else is a constant.

Broadcasting is deliberately narrow: elementwise ops take equal shapes or a
scalar operand; anything else goes through :func:`expand`.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    """Immutable n-d float64 array, optionally linked to a tape node."""

    __slots__ = ("_value", "node", "tape")

    def __init__(self, value, *, _node: int | None = None, _tape: "Tape | None" = None):
        arr = np.array(value, dtype=DTYPE)  # always a private copy
        arr.flags.writeable = False
        self._value = arr
        self.node = _node
        self.tape = _tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, node=None, tape=None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        t._value = arr
        t.node = node
        t.tape = tape
        return t

    @property
    def value(self) -> np.ndarray:
        return self._value

    @property
    def shape(self) -> tuple[int, ...]:
        return self._value.shape

    @property
    def ndim(self) -> int:
        return self._value.ndim

    @property
    def size(self) -> int:
        return self._value.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self._value.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._value.copy()

    def item(self) -> float:
        return float(self._value)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return NotImplemented

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
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only record of primitive ops; confined to the creating thread."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def watch(self, t: Tensor | np.ndarray) -> Tensor:
        """Return a tape leaf holding the same values as ``t``."""
        arr = t.value if isinstance(t, Tensor) else np.array(t, dtype=DTYPE)
        node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor._wrap(arr, node, self)

    def gradient(self, loss: Tensor, wrt):
        """Gradients of ``loss`` w.r.t. watched tensors (mapping or sequence)."""
        grads = backward(self, loss)
        if isinstance(wrt, Mapping):
            return {k: _grad_or_zeros(grads, v) for k, v in wrt.items()}
        return [_grad_or_zeros(grads, v) for v in wrt]


def _grad_or_zeros(grads: dict[int, np.ndarray], t: Tensor) -> np.ndarray:
    g = grads.get(t.node)
    return np.zeros(t.shape) if g is None else g


def _stack() -> list[Tape]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def current_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.array(x, dtype=DTYPE))


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = current_tape()
    if tape is None:
        return Tensor._wrap(out)
    ids = tuple(t.node if (t.tape is tape and t.node is not None) else None for t in inputs)
    if all(i is None for i in ids):
        return Tensor._wrap(out)
    node = len(tape.nodes)
    tape.nodes.append(_Node(op, ids, backward_fn, out.shape))
    return Tensor._wrap(out, node, tape)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) for every node reachable from ``loss``.

    Returns gradients of leaf nodes only; intermediates are dropped as soon
    as they have been pushed to their inputs.
    """
    if loss.tape is not tape or loss.node is None or loss.node >= len(tape.nodes):
        raise ValueError("loss is not recorded on this tape")
    if loss.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=DTYPE)}
    leaves: dict[int, np.ndarray] = {}
    for idx in range(loss.node, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.backward is None:
            leaves[idx] = g
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if inp is None or gi is None:
                continue
            prev = grads.get(inp)
            grads[inp] = gi if prev is None else prev + gi
    return leaves


# -- elementwise ---------------------------------------------------------------

def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ; use expand()")


def _unscalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b),
                   lambda g: (_unscalar(g, sa), _unscalar(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.value - b.value, (a, b),
                   lambda g: (_unscalar(g, sa), _unscalar(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)
    av, bv = a.value, b.value
    return _record("mul", av * bv, (a, b),
                   lambda g: (_unscalar(g * bv, av.shape), _unscalar(g * av, bv.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return _record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.value
    return _record("log", np.log(xv), (x,), lambda g: (g / xv,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.value, 0.0)
    return _record("relu", out, (x,), lambda g: (g * (out > 0),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)
    return _record("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


# -- shape ops -----------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.value.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from e
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.value.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (g.transpose(inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as e:
        raise ShapeError(f"cannot expand {x.shape} to {shape}") from e
    src = x.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        return (r.reshape(src),)

    return _record("expand", out, (x,), bw)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis, keepdims), 1.0 / float(n))


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dims must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim
            or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g)

    return _record("matmul", av @ bv, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, expand(b, y.shape))
    return reshape(y, lead + (w.shape[-1],))


# -- normalisation / probabilities --------------------------------------------

def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-6) -> Tensor:
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last dim {d}")
    xv, gv = x.value, gain.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * rstd
    out = xhat * gv + bias.value

    def bw(g):
        red = tuple(range(g.ndim - 1))
        gx_hat = g * gv
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record("layer_norm", out, (x, gain, bias), bw)


# -- indexing ------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def bw(g):
        gt = np.zeros((vocab, d))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _record("embedding", table.value[ids], (table,), bw)


def gather_last(x: Tensor, idx) -> Tensor:
    """``out[..., ] = x[..., idx[...]]`` picking one entry along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs {x.shape[:-1]}")
    shape = x.shape
    picked = np.take_along_axis(x.value, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record("gather_last", picked, (x,), bw)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; the mask comes from ``rng`` and is saved on the tape."""
    if keep_prob >= 1.0 or rng is None:
        return x
    if not 0.0 < keep_prob < 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return _record("dropout", x.value * mask, (x,), lambda g: (g * mask,))


# -- gradient checking -----------------------------------------------------------

def check_gradients(f: Callable[[dict[str, Tensor]], Tensor],
                    params: Mapping[str, np.ndarray | Tensor],
                    h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    The error for one parameter is ``|a - n| / max(1e-12, |a| + |n|)`` with
    Euclidean norms taken over that parameter's entries; the maximum over all
    parameters is returned.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v.value if isinstance(v, Tensor) else v, dtype=DTYPE)
            for k, v in params.items()}
    with Tape() as tape:
        watched = {k: tape.watch(v) for k, v in base.items()}
        loss = f(watched)
    analytic = tape.gradient(loss, watched)

    def value_at(name, flat_index, delta):
        arr = base[name]
        old = arr.flat[flat_index]
        arr.flat[flat_index] = old + delta
        try:
            return as_tensor(f({k: Tensor._wrap(v.copy()) for k, v in base.items()})).item()
        finally:
            arr.flat[flat_index] = old

    worst = 0.0
    for name, arr in base.items():
        a = analytic[name]
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        num = np.empty(arr.size)
        for i in range(arr.size):
            num[i] = (value_at(name, i, h) - value_at(name, i, -h)) / (2 * h)
        if not np.all(np.isfinite(num)):
            raise FloatingPointError(f"non-finite numeric gradient for {name}")
        diff = np.linalg.norm(a.reshape(-1) - num)
        scale = max(1e-12, np.linalg.norm(a) + np.linalg.norm(num))
        worst = max(worst, diff / scale)
    return worst


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor._wrap(x.value)


def constants(arrays: Iterable[np.ndarray]) -> list[Tensor]:
    return [Tensor._wrap(np.asarray(a, dtype=DTYPE)) for a in arrays]
