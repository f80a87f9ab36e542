"""Scaled dot-product attention, multi-head wrapper, softmax and 1.5-entmax."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional

import numpy as np

from . import kernels
from .cost import active_counter
from .errors import MaskError, ShapeError
from .tensor import Tensor, add, make_op, matmul, reshape, scale, transpose

DEFAULT_NEG_FILL = -1e9


class AttentionKind(str, enum.Enum):
    SELF_ENCODER = "self_encoder"
    SELF_DECODER = "self_decoder"
    CROSS = "cross"

    def __str__(self):
        return self.value


class HeadKey(NamedTuple):
    kind: AttentionKind
    layer: int
    head: int


class Activation(str, enum.Enum):
    SOFTMAX = "softmax"
    ENTMAX15 = "entmax15"


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    d_k: int = 0
    d_v: int = 0
    activation: str = "softmax"
    neg_fill: float = DEFAULT_NEG_FILL

    def __post_init__(self):
        if self.d_k == 0:
            object.__setattr__(self, "d_k", self.d_model // self.n_heads)
        if self.d_v == 0:
            object.__setattr__(self, "d_v", self.d_model // self.n_heads)
        if self.d_k * self.n_heads != self.d_model or self.d_v * self.n_heads != self.d_model:
            raise ValueError("d_k * n_heads and d_v * n_heads must both equal d_model")
        if self.neg_fill > -1e6:
            raise ValueError("neg_fill must be <= -1e6")
        Activation(self.activation)


class AdditiveMask:
    """[n_query, n_key] matrix of 0 (keep) and neg_fill (masked) entries."""

    def __init__(self, matrix, neg_fill: float = DEFAULT_NEG_FILL):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeError("an additive mask is two-dimensional")
        if not np.all((matrix == 0.0) | (matrix == neg_fill)):
            raise MaskError("additive mask entries must be 0 or neg_fill")
        _check_rows(matrix)
        self.matrix = matrix
        self.neg_fill = neg_fill

    @property
    def shape(self):
        return self.matrix.shape

    def combine(self, other: "AdditiveMask") -> "AdditiveMask":
        return AdditiveMask(np.minimum(self.matrix, other.matrix), self.neg_fill)


def _check_rows(matrix):
    if matrix.shape[-1] and np.any(np.all(matrix < 0, axis=-1)):
        raise MaskError("mask leaves a query row with no unmasked key")


def build_causal_mask(n: int, neg_fill: float = DEFAULT_NEG_FILL) -> AdditiveMask:
    if n < 1:
        raise ValueError("n must be >= 1")
    return AdditiveMask(np.triu(np.full((n, n), neg_fill), k=1), neg_fill)


# ------------------------------------------------------------ normalisers


def softmax_rows(logits: Tensor) -> Tensor:
    z = logits.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_op(p, (logits,), backward)


def entmax15_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of 1.5-entmax at output ``p``."""
    s = np.sqrt(p)
    ssum = s.sum(axis=-1, keepdims=True)
    return s * (g - (g * s).sum(axis=-1, keepdims=True) / ssum)


def entmax15_rows(logits: Tensor) -> Tensor:
    p = kernels.entmax15_rows_array(logits.data)
    return make_op(p, (logits,), lambda g: (entmax15_backward(p, g),))


NORMALISERS: Dict[str, Callable[[Tensor], Tensor]] = {
    "softmax": softmax_rows,
    "entmax15": entmax15_rows,
}


# -------------------------------------------------------------- attention


def _mask_array(mask) -> Optional[np.ndarray]:
    if mask is None:
        return None
    if isinstance(mask, AdditiveMask):
        return mask.matrix
    return np.asarray(mask, dtype=np.float64)


def _apply_weights(weights: Tensor, values: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    counter = active_counter()
    if counter is None:
        return matmul(weights, values)
    lead = np.broadcast_shapes(weights.shape[:-2], values.shape[:-2])
    w = np.broadcast_to(weights.data, lead + weights.shape[-2:])
    v = np.broadcast_to(values.data, lead + values.shape[-2:])
    masked = np.zeros(w.shape, dtype=bool) if mask is None else np.broadcast_to(mask < 0, w.shape)
    out, macs = kernels.sparse_apply(
        np.ascontiguousarray(w.reshape((-1,) + w.shape[-2:])),
        np.ascontiguousarray(v.reshape((-1,) + v.shape[-2:])),
        np.ascontiguousarray(masked.reshape((-1,) + w.shape[-2:])),
    )
    counter.add("weighted_values", macs)
    dense = matmul(weights, values)
    # masked weights are exactly zero, so the dense backward rule still holds
    return make_op(out.reshape(lead + out.shape[-2:]), (dense,), lambda g: (g,))


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor, mask=None,
                       activation: str = "softmax"):
    """Return ``(activation((QK^T + M) / sqrt(d_k)) V, weights)``."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    n, m, d_k = q.shape[-2], k.shape[-2], q.shape[-1]
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    counter = active_counter()
    if counter is not None:
        counter.add("scores", scores.data.size * d_k)
    m_arr = _mask_array(mask)
    if m_arr is not None:
        if m_arr.shape[-2:] != (n, m):
            raise ShapeError(f"mask window {m_arr.shape[-2:]} does not match scores {(n, m)}")
        _check_rows(m_arr)
        scores = add(scores, Tensor(m_arr))
    weights = NORMALISERS[activation](scale(scores, 1.0 / math.sqrt(d_k)))
    return _apply_weights(weights, v, m_arr), weights


def _project(x: Tensor, w: Tensor, b: Optional[Tensor], step: Optional[str]) -> Tensor:
    counter = active_counter()
    if counter is not None and step is not None:
        counter.add(step, int(np.prod(x.shape[:-1])) * w.shape[0] * w.shape[1])
    y = matmul(x, w)
    return y if b is None else add(y, b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, tuple(lead) + (n, heads, d // heads))
    nd = x.ndim
    return transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    *lead, n, h, dh = x.shape
    return reshape(x, tuple(lead) + (n, h * dh))


def combine_masks(n: int, m: int, config: AttentionConfig, head_masks=None,
                  causal: bool = False, key_valid=None) -> Optional[np.ndarray]:
    """Entrywise minimum of causal, per-head prune and key-padding masks.

    Result broadcasts against scores of shape [..., H, n, m]; None means no mask.
    """
    fill = config.neg_fill
    out = None
    if causal:
        out = build_causal_mask(n, fill).matrix if n == m else np.triu(np.full((n, m), fill), 1)
    if head_masks is not None:
        if isinstance(head_masks, np.ndarray) and head_masks.ndim >= 3:
            stack = head_masks
        else:
            if len(head_masks) != config.n_heads:
                raise MaskError(f"{len(head_masks)} head masks for {config.n_heads} heads")
            stack = np.stack([np.zeros((n, m)) if hm is None else _mask_array(hm)
                              for hm in head_masks])
        if stack.shape[-3] != config.n_heads:
            raise MaskError(f"{stack.shape[-3]} head masks for {config.n_heads} heads")
        out = stack if out is None else np.minimum(out, stack)
    if key_valid is not None:
        kv = np.asarray(key_valid, dtype=bool)
        if not kv.all():
            pad = np.where(kv, 0.0, fill)[..., None, None, :]
            out = np.minimum(np.zeros((n, m)) if out is None else out, pad)
    return out


def multi_head(x_q: Tensor, x_kv: Tensor, params: Dict[str, Tensor], config: AttentionConfig,
               head_masks=None, causal: bool = False, key_valid=None,
               observer: Optional[Callable[[np.ndarray], None]] = None) -> Tensor:
    """Multi-head attention over [..., n, d] queries and [..., m, d] keys/values.

    ``head_masks`` is either a sequence of H per-head masks (None entries allowed)
    or a precombined array broadcasting to [..., H, n, m]. ``observer`` receives
    the post-activation weights as an array of shape [..., H, n, m].
    """
    h = config.n_heads
    q = _split_heads(_project(x_q, params["wq"], params.get("bq"), "qkv_projection"), h)
    k = _split_heads(_project(x_kv, params["wk"], params.get("bk"), "qkv_projection"), h)
    v = _split_heads(_project(x_kv, params["wv"], params.get("bv"), "qkv_projection"), h)
    n, m = x_q.shape[-2], x_kv.shape[-2]
    mask = combine_masks(n, m, config, head_masks, causal, key_valid)
    out, weights = scaled_dot_product(q, k, v, mask, config.activation)
    if observer is not None:
        observer(weights.data)
    return _project(_merge_heads(out), params["wo"], params.get("bo"), "output_projection")


def attention_param_shapes(config: AttentionConfig) -> Dict[str, tuple]:
    d = config.d_model
    return {"wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,),
            "wv": (d, d), "bv": (d,), "wo": (d, d), "bo": (d,)}
