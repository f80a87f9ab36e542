"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record onto the innermost active :class:`Tape`. Outside any tape
nothing is recorded, so plain forward passes (evaluation, decoding) cost no
graph bookkeeping.

    with Tape() as tape:
        w = Tensor(np.ones((3, 3)), requires_grad=True)
        loss = (w @ w).sum()
        grads = tape.backward(loss)   # {w: ndarray}
"""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import DegenerateBatchError, DomainError, NumericalError, ShapeError

_ACTIVE: List["Tape"] = []


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def reset(self):
        for out, _, _ in self.nodes:
            out.tape_id = None
            out._tape = None
        self.nodes = []

    def backward(self, loss: "Tensor") -> Dict["Tensor", np.ndarray]:
        """Propagate d(loss)/d(.) to every leaf that requires grad.

        Returns a map leaf -> gradient; leaf ``.grad`` fields are accumulated too.
        The tape is reset afterwards.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        pending = {id(loss): np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        leaf_grads: Dict[int, np.ndarray] = {}
        for idx in range(loss.tape_id, -1, -1):
            out, inputs, fn = self.nodes[idx]
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.tape_id is None:
                    leaves[key] = inp
                    store = leaf_grads
                else:
                    store = pending
                if key in store:
                    store[key] = store[key] + gi
                else:
                    store[key] = gi
        self.reset()
        grads = {}
        for key, leaf in leaves.items():
            g = leaf_grads[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            grads[leaf] = g
        return grads


def _active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.tape_id = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul with a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 else axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op and record it if a tape is active.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward_fn)
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def scale(a, s: float):
    return make_op(a.data * s, (a,), lambda g: (g * s,))


def relu(a):
    # subgradient at 0 is 0
    pos = a.data > 0
    return make_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a):
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive entry")
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative entry")
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def maximum(a, s: float):
    """max(a, s) for a scalar s; ties route the gradient to s."""
    keep = a.data > s
    return make_op(np.where(keep, a.data, s), (a,), lambda g: (g * keep,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu,
    "exp": exp, "log": log, "sqrt": sqrt, "max-with-scalar": maximum,
}


def elementwise(op_kind: str, a, b=None):
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("relu", "exp", "log", "sqrt"):
        return fn(as_tensor(a))
    return fn(as_tensor(a), b)


# ------------------------------------------------------------------- matmul


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2  # activations @ weight: fold batch dims into rows
    try:
        if flat:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[1:])
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_op(out, (a, b), backward)


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if np.isscalar(axis) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
    return tuple(ax % ndim for ax in axes)


def reduce(op_kind: str, a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    if op_kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)
        factor = 1.0
    elif op_kind == "mean":
        out = a.data.mean(axis=axes, keepdims=keepdims)
        factor = out.size / a.data.size if a.data.size else 0.0
    elif op_kind == "max":
        out = a.data.max(axis=axes, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction {op_kind!r}")

    def expand(g):
        if not keepdims and axes is not None:
            g = np.expand_dims(g, axes)
        return g

    if op_kind == "max":
        def backward(g):
            full = expand(out) if not keepdims else out
            hit = a.data == full
            return (np.broadcast_to(expand(g), a.shape) * hit / hit.sum(axis=axes, keepdims=True),)
    else:
        def backward(g):
            return (np.broadcast_to(expand(g) * factor, a.shape).copy(),)

    return make_op(np.asarray(out), (a,), backward)


# ------------------------------------------------------------------- shapes


def reshape(a, shape):
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


# ------------------------------------------------------------ model pieces


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab, width = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")
    out = table.data[ids] if ids.size else np.zeros(ids.shape + (width,))

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, width))
        return (gt,)

    return make_op(out, (table,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out, (x, gamma, beta), backward)


def cross_entropy(logits: Tensor, targets, ignore_id: Optional[int] = None) -> Tensor:
    """Mean negative log-softmax of the target entries, skipping ``ignore_id``."""
    vocab = logits.shape[-1]
    z = logits.data.reshape(-1, vocab)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {z.shape[0]} logit rows")
    valid = np.ones_like(t, dtype=bool) if ignore_id is None else t != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("every target position is ignored")
    if np.any((t[valid] < 0) | (t[valid] >= vocab)):
        raise IndexError(f"target id out of range [0, {vocab})")
    safe_t = np.where(valid, t, 0)
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(len(t)), safe_t]
    loss = float(nll[valid].sum() / count)

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(len(t)), safe_t] -= 1.0
        probs *= (valid / count)[:, None]
        return ((g * probs).reshape(logits.shape),)

    return make_op(np.asarray(loss), (logits,), backward)


# ----------------------------------------------------------------- autodiff


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    if loss._tape is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        raise ValueError("loss is not on an active tape")
    return loss._tape.backward(loss)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences."""
    x = np.array(x, dtype=np.float64)
    with Tape() as tape:
        leaf = Tensor(x.copy(), requires_grad=True)
        out = f(leaf)
        grads = tape.backward(out)
    analytic = grads.get(leaf, np.zeros_like(x))
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(Tensor(x)).data)
        flat[i] = orig - eps
        down = float(f(Tensor(x)).data)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"f is not finite near coordinate {i}")
        num_flat[i] = (up - down) / (2 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
