"""Average attention statistics, percentile thresholds and global prune masks."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import kernels
from .attention import DEFAULT_NEG_FILL, AdditiveMask, AttentionKind, HeadKey
from .errors import MaskError, ShapeError

MASK_SCHEMA_VERSION = 1
SPARSITY_BAND = (5.0, 1.0)  # allowed shortfall / excess in percentage points

Window = Tuple[int, int]


def _kind(k) -> AttentionKind:
    return AttentionKind(k)


def _head_keys(windows: Dict[AttentionKind, Window], n_layers: int, n_heads: int):
    for kind in windows:
        for layer in range(n_layers):
            for head in range(n_heads):
                yield HeadKey(kind, layer, head)


def _config_layout(config):
    windows = {kind: config.window(kind) for kind in config.kinds}
    return windows, config.n_layers, config.n_heads


# ------------------------------------------------------------------- stats


class AttentionStats:
    """Per-head running sums and visit counts of observed attention weights.

    Calling the object with ``(head_key, weights, query_valid, key_valid)`` makes
    it usable directly as a model observer.
    """

    def __init__(self, windows: Dict, n_layers: int, n_heads: int):
        self.windows = {_kind(k): tuple(v) for k, v in windows.items()}
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.sums: Dict[HeadKey, np.ndarray] = {}
        self.counts: Dict[HeadKey, np.ndarray] = {}
        for key in _head_keys(self.windows, n_layers, n_heads):
            shape = self.windows[key.kind]
            self.sums[key] = np.zeros(shape)
            self.counts[key] = np.zeros(shape, dtype=np.int64)
        self.examples_seen = 0
        self.source = ""  # digest of the checkpoint the weights came from, when known

    @classmethod
    def for_config(cls, config) -> "AttentionStats":
        return cls(*_config_layout(config))

    def keys(self) -> List[HeadKey]:
        return list(self.sums)

    def __call__(self, head_key, weights, query_valid, key_valid):
        accumulate(self, head_key, weights, query_valid, key_valid)

    def same_layout(self, other: "AttentionStats") -> bool:
        return (self.windows == other.windows and self.n_layers == other.n_layers
                and self.n_heads == other.n_heads)


def accumulate(stats: AttentionStats, head_key: HeadKey, weights, query_valid=None,
               key_valid=None, causal: Optional[bool] = None) -> None:
    """Add one example's [n, m] weights for valid (query, key) pairs.

    Causal (decoder self-attention) heads skip keys after the query position.
    """
    head_key = HeadKey(_kind(head_key[0]), head_key[1], head_key[2])
    if head_key not in stats.sums:
        raise KeyError(f"unknown head {head_key}")
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    n, m = weights.shape
    max_n, max_m = stats.windows[head_key.kind]
    if n > max_n or m > max_m:
        raise ShapeError(f"weights {weights.shape} exceed the {max_n}x{max_m} window")
    qv = np.ones(n, dtype=bool) if query_valid is None else np.asarray(query_valid, dtype=bool)
    kv = np.ones(m, dtype=bool) if key_valid is None else np.asarray(key_valid, dtype=bool)
    if causal is None:
        causal = head_key.kind is AttentionKind.SELF_DECODER
    kernels.accumulate_window(stats.sums[head_key], stats.counts[head_key], weights, qv, kv,
                              bool(causal))


def merge(a: AttentionStats, b: AttentionStats) -> AttentionStats:
    if not a.same_layout(b):
        raise ShapeError("cannot merge statistics with different heads or windows")
    out = AttentionStats(a.windows, a.n_layers, a.n_heads)
    for key in out.sums:
        out.sums[key] = a.sums[key] + b.sums[key]
        out.counts[key] = a.counts[key] + b.counts[key]
    out.examples_seen = a.examples_seen + b.examples_seen
    out.source = a.source if a.source == b.source else ""
    return out


@dataclass
class AverageAttention:
    """Mean attention per head; ``visited`` marks entries with at least one observation."""

    windows: Dict[AttentionKind, Window]
    n_layers: int
    n_heads: int
    mean: Dict[HeadKey, np.ndarray]
    visited: Dict[HeadKey, np.ndarray]

    def layer_average(self, kind, layer) -> np.ndarray:
        kind = _kind(kind)
        return np.mean([self.mean[HeadKey(kind, layer, h)] for h in range(self.n_heads)], axis=0)


def average(stats: AttentionStats) -> AverageAttention:
    if stats.examples_seen < 1 and not any(c.any() for c in stats.counts.values()):
        raise ValueError("no examples accumulated")
    mean, visited = {}, {}
    for key, s in stats.sums.items():
        c = stats.counts[key]
        vis = c > 0
        mean[key] = np.divide(s, c, out=np.zeros_like(s), where=vis)
        visited[key] = vis
    return AverageAttention(dict(stats.windows), stats.n_layers, stats.n_heads, mean, visited)


def save_stats(stats: AttentionStats, path) -> None:
    arrays = {}
    for key in stats.keys():
        tag = f"{key.kind.value}.{key.layer}.{key.head}"
        arrays[f"sum.{tag}"] = stats.sums[key]
        arrays[f"count.{tag}"] = stats.counts[key]
    meta = {"windows": {k.value: list(v) for k, v in stats.windows.items()},
            "n_layers": stats.n_layers, "n_heads": stats.n_heads,
            "examples_seen": stats.examples_seen, "source": stats.source}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_stats(path) -> AttentionStats:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        stats = AttentionStats(meta["windows"], meta["n_layers"], meta["n_heads"])
        for key in stats.keys():
            tag = f"{key.kind.value}.{key.layer}.{key.head}"
            stats.sums[key] = data[f"sum.{tag}"].astype(np.float64)
            stats.counts[key] = data[f"count.{tag}"].astype(np.int64)
    stats.examples_seen = meta["examples_seen"]
    stats.source = meta.get("source", "")
    return stats


# -------------------------------------------------------------- thresholds


@dataclass(frozen=True)
class PruneSpec:
    p: float
    kinds: Tuple[AttentionKind, ...] = (AttentionKind.SELF_ENCODER, AttentionKind.SELF_DECODER,
                                        AttentionKind.CROSS)

    def __post_init__(self):
        if not 0 <= self.p <= 100:
            raise ValueError("p is a percentage in [0, 100]")
        object.__setattr__(self, "kinds", tuple(_kind(k) for k in self.kinds))


def _layer_pool(avg: AverageAttention, kind, layer) -> np.ndarray:
    kind = _kind(kind)
    parts = [avg.mean[HeadKey(kind, layer, h)][avg.visited[HeadKey(kind, layer, h)]]
             for h in range(avg.n_heads)]
    return np.concatenate(parts)


def _rank_index(p: float, size: int) -> int:
    return min(size - 1, math.floor(Fraction(p) * size / 100))


def layer_threshold(avg: AverageAttention, kind, layer: int, p: float) -> float:
    """Nearest-rank p-th percentile of the visited mean weights of all heads in a layer."""
    pool = np.sort(_layer_pool(avg, kind, layer))
    if pool.size == 0:
        raise ValueError(f"no visited entries in {kind} layer {layer}")
    return float(pool[_rank_index(p, pool.size)])


def prune_candidates(avg: AverageAttention, kind, layer: int, p: float):
    """Per-head boolean arrays of visited entries strictly below the layer threshold."""
    kind = _kind(kind)
    tau = layer_threshold(avg, kind, layer, p)
    out = {}
    for h in range(avg.n_heads):
        key = HeadKey(kind, layer, h)
        out[h] = avg.visited[key] & (avg.mean[key] < tau)
    return tau, out


def _row_keep(pruned, visited, scores):
    """Unprune the best-scoring visited entry of every visited row left fully pruned."""
    restored = []
    for i in range(pruned.shape[0]):
        row_vis = visited[i]
        if row_vis.any() and not (row_vis & ~pruned[i]).any():
            j = int(np.argmax(np.where(row_vis, scores[i], -np.inf)))
            pruned[i, j] = False
            restored.append((i, j))
    return restored


# ------------------------------------------------------------------- masks


@dataclass
class HeadMask:
    pruned: np.ndarray  # bool, True = pruned
    visited: np.ndarray
    mean: np.ndarray  # cached mean weights (0 where unvisited)
    rowkeep: List[Tuple[int, int]] = field(default_factory=list)


class MaskSet:
    """Global per-head prune masks plus the metadata needed to reproduce them."""

    def __init__(self, windows, n_layers, n_heads, heads: Dict[HeadKey, HeadMask], p=0.0,
                 kinds=(), source_dataset="", seed=None, thresholds=None, baseline="ap",
                 neg_fill=DEFAULT_NEG_FILL):
        self.windows = {_kind(k): tuple(v) for k, v in windows.items()}
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.heads = heads
        self.p = p
        self.kinds = tuple(_kind(k) for k in kinds)
        self.source_dataset = source_dataset
        self.seed = seed
        self.thresholds: Dict[Tuple[AttentionKind, int], float] = dict(thresholds or {})
        self.baseline = baseline
        self.neg_fill = neg_fill
        self._cache = {}

    @classmethod
    def empty(cls, config, **meta) -> "MaskSet":
        windows, n_layers, n_heads = _config_layout(config)
        return cls(windows, n_layers, n_heads, {}, **meta)

    def is_empty(self) -> bool:
        return not any(hm.pruned.any() for hm in self.heads.values())

    def check_compatible(self, config) -> None:
        windows, n_layers, n_heads = _config_layout(config)
        if n_layers != self.n_layers or n_heads != self.n_heads:
            raise MaskError(f"mask built for L={self.n_layers}, H={self.n_heads}; model has "
                            f"L={n_layers}, H={n_heads}")
        for kind in self.kinds:
            if kind not in windows:
                raise MaskError(f"model has no {kind} attention")
            if windows[kind] != self.windows[kind]:
                raise MaskError(f"{kind} window {self.windows[kind]} does not match model "
                                f"window {windows[kind]}")

    def layer_window(self, kind, layer, n, m, causal=False, query_lengths=None,
                     key_lengths=None) -> Optional[np.ndarray]:
        """Additive masks for one layer: [H, n, m], or [B, H, n, m] for ragged batches.

        Returns None when the layer has nothing pruned, so an empty mask is a no-op.
        """
        kind = _kind(kind)
        if not any(self.heads.get(HeadKey(kind, layer, h)) is not None
                   and self.heads[HeadKey(kind, layer, h)].pruned.any()
                   for h in range(self.n_heads)):
            return None
        ql = np.full(1, n) if query_lengths is None else np.asarray(query_lengths)
        kl = np.full(1, m) if key_lengths is None else np.asarray(key_lengths)
        if np.all(ql == n) and np.all(kl == m):
            return self._layer_slice(kind, layer, n, m, causal)
        out = np.zeros((len(ql), self.n_heads, n, m))
        for b, (qn, km) in enumerate(zip(ql, kl)):
            qn, km = int(qn), int(km)
            if qn and km:
                out[b, :, :qn, :km] = self._layer_slice(kind, layer, qn, km, causal)
        return out

    def _layer_slice(self, kind, layer, n, m, causal):
        key = (kind, layer, n, m, causal)
        if key not in self._cache:
            self._cache[key] = np.stack([
                slice_additive(self, HeadKey(kind, layer, h), n, m, self.neg_fill, causal).matrix
                for h in range(self.n_heads)])
        return self._cache[key]


def _empty_head(shape) -> HeadMask:
    return HeadMask(np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool), np.zeros(shape))


def build_masks(avg: AverageAttention, spec: PruneSpec, source_dataset: str = "",
                check_band: bool = True) -> MaskSet:
    """Prune visited entries below the layer percentile; unvisited entries too when p > 0.

    With ``check_band`` a layer whose candidate sparsity misses its nearest-rank
    target by more than the band (typically heavy ties) raises :class:`MaskError`.
    """
    heads: Dict[HeadKey, HeadMask] = {}
    thresholds = {}
    for kind in spec.kinds:
        if kind not in avg.windows:
            raise MaskError(f"statistics have no {kind} attention")
        for layer in range(avg.n_layers):
            tau, cands = prune_candidates(avg, kind, layer, spec.p)
            thresholds[(kind, layer)] = tau
            if check_band and spec.p > 0:
                _check_band(avg, kind, layer, spec.p, cands)
            for h, cand in cands.items():
                key = HeadKey(kind, layer, h)
                vis = avg.visited[key]
                pruned = cand | ~vis if spec.p > 0 else cand.copy()
                rowkeep = _row_keep(pruned, vis, avg.mean[key])
                heads[key] = HeadMask(pruned, vis.copy(), avg.mean[key].copy(), rowkeep)
    _fill_uncovered(heads, avg)
    return MaskSet(avg.windows, avg.n_layers, avg.n_heads, heads, p=spec.p, kinds=spec.kinds,
                   source_dataset=source_dataset, thresholds=thresholds, baseline="ap")


def _fill_uncovered(heads, avg):
    for key in _head_keys(avg.windows, avg.n_layers, avg.n_heads):
        if key not in heads:
            hm = _empty_head(avg.windows[key.kind])
            hm.visited = avg.visited[key].copy()
            hm.mean = avg.mean[key].copy()
            heads[key] = hm


def _check_band(avg, kind, layer, p, cands):
    pool = sum(int(avg.visited[HeadKey(kind, layer, h)].sum()) for h in range(avg.n_heads))
    hit = sum(int(c.sum()) for c in cands.values())
    target = 100.0 * _rank_index(p, pool) / pool
    got = 100.0 * hit / pool
    low, high = SPARSITY_BAND
    if got < target - low or got > p + high:
        raise MaskError(
            f"{kind} layer {layer}: candidate sparsity {got:.2f}% vs target {target:.2f}% "
            f"(p={p}); {pool} visited entries, threshold ties leave too few entries "
            f"strictly below it")


def random_masks(shape_like, p: float, seed: int, kinds=None) -> MaskSet:
    """Prune round(p% of visited) entries per head uniformly at random."""
    if not 0 <= p <= 100:
        raise ValueError("p is a percentage in [0, 100]")
    if isinstance(shape_like, AttentionStats):
        shape_like = average(shape_like)
    if isinstance(shape_like, MaskSet):
        visited = {k: hm.visited for k, hm in shape_like.heads.items()}
        means = {k: hm.mean for k, hm in shape_like.heads.items()}
    else:
        visited, means = shape_like.visited, shape_like.mean
    windows, n_layers, n_heads = shape_like.windows, shape_like.n_layers, shape_like.n_heads
    kinds = tuple(_kind(k) for k in (kinds or windows.keys()))
    rng = np.random.default_rng(seed)
    heads = {}
    for key in _head_keys(windows, n_layers, n_heads):
        vis = visited[key]
        if key.kind not in kinds:
            hm = _empty_head(windows[key.kind])
            hm.visited, hm.mean = vis.copy(), means[key].copy()
            heads[key] = hm
            continue
        flat = np.flatnonzero(vis)
        k = int(round(p / 100 * flat.size))
        pruned = np.zeros(vis.shape, dtype=bool)
        pruned.flat[rng.choice(flat, size=k, replace=False)] = True
        if p > 0:
            pruned |= ~vis
        rowkeep = []
        for i in range(vis.shape[0]):
            row = np.flatnonzero(vis[i])
            if row.size and pruned[i, row].all():
                j = int(rng.choice(row))
                pruned[i, j] = False
                rowkeep.append((i, j))
        heads[key] = HeadMask(pruned, vis.copy(), means[key].copy(), rowkeep)
    return MaskSet(windows, n_layers, n_heads, heads, p=p, kinds=kinds, seed=seed,
                   baseline="random")


def slice_additive(maskset: MaskSet, head_key: HeadKey, n: int, m: int,
                   neg_fill: float = DEFAULT_NEG_FILL, causal: bool = False) -> AdditiveMask:
    """Top-left n x m window of a stored mask as an additive mask, repaired row-wise.

    A row left without an allowed unpruned key (allowed = j <= i when causal) gets
    its allowed entry of largest cached mean weight cleared.
    """
    head_key = HeadKey(_kind(head_key[0]), head_key[1], head_key[2])
    max_n, max_m = maskset.windows.get(head_key.kind, (0, 0))
    if head_key.layer >= maskset.n_layers or head_key.head >= maskset.n_heads or not max_n:
        raise KeyError(f"head {head_key} is not part of this mask set")
    if n > max_n or m > max_m:
        raise ShapeError(f"window {n}x{m} exceeds stored {max_n}x{max_m}")
    hm = maskset.heads.get(head_key)
    if hm is None:
        return AdditiveMask(np.zeros((n, m)), neg_fill)
    window = hm.pruned[:n, :m].copy()
    allowed = np.tri(n, m, dtype=bool) if causal else np.ones((n, m), dtype=bool)
    score = np.where(hm.visited[:n, :m], hm.mean[:n, :m], -1.0)
    for i in range(n):
        if not (allowed[i] & ~window[i]).any():
            j = int(np.argmax(np.where(allowed[i], score[i], -np.inf)))
            window[i, j] = False
    return AdditiveMask(np.where(window, neg_fill, 0.0), neg_fill)


def mask_sparsity(maskset: MaskSet) -> dict:
    """Pruned fraction of visited entries: overall, per kind and per (kind, layer)."""
    per_kind: Dict[str, List[int]] = {}
    per_layer: Dict[str, List[int]] = {}
    total = [0, 0]
    for key, hm in maskset.heads.items():
        hit = int((hm.pruned & hm.visited).sum())
        vis = int(hm.visited.sum())
        for acc in (per_kind.setdefault(key.kind.value, [0, 0]),
                    per_layer.setdefault(f"{key.kind.value}.{key.layer}", [0, 0]), total):
            acc[0] += hit
            acc[1] += vis

    def frac(acc):
        return acc[0] / acc[1] if acc[1] else 0.0

    return {"overall": frac(total),
            "per_kind": {k: frac(v) for k, v in sorted(per_kind.items())},
            "per_layer": {k: frac(v) for k, v in sorted(per_layer.items())}}


# --------------------------------------------------------------------- I/O


def _pairs(mask: np.ndarray) -> List[List[int]]:
    return [[int(i), int(j)] for i, j in zip(*np.nonzero(mask))]


def masks_to_json(maskset: MaskSet) -> str:
    heads = []
    for key in sorted(maskset.heads, key=lambda k: (k.kind.value, k.layer, k.head)):
        hm = maskset.heads[key]
        n_max, m_max = hm.pruned.shape
        avg_rows = [[float(hm.mean[i, j]) if hm.visited[i, j] else None for j in range(m_max)]
                    for i in range(n_max)]
        heads.append({"kind": key.kind.value, "layer": key.layer, "head": key.head,
                      "n_max": n_max, "m_max": m_max, "pruned_pairs": _pairs(hm.pruned),
                      "rowkeep_pairs": sorted([list(p) for p in hm.rowkeep]), "avg": avg_rows})
    doc = {
        "schema_version": MASK_SCHEMA_VERSION,
        "p": maskset.p,
        "kinds": [k.value for k in maskset.kinds],
        "source_dataset": maskset.source_dataset,
        "seed": maskset.seed,
        "baseline": maskset.baseline,
        "n_layers": maskset.n_layers,
        "n_heads": maskset.n_heads,
        "windows": {k.value: list(v) for k, v in sorted(maskset.windows.items(),
                                                        key=lambda kv: kv[0].value)},
        "thresholds": [{"kind": k.value, "layer": l, "tau": t}
                       for (k, l), t in sorted(maskset.thresholds.items(),
                                               key=lambda kv: (kv[0][0].value, kv[0][1]))],
        "heads": heads,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_masks(maskset: MaskSet, path) -> None:
    Path(path).write_text(masks_to_json(maskset) + "\n")


def load_masks(path, config=None) -> MaskSet:
    """Read a mask file; with ``config`` the layout is checked against the model."""
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != MASK_SCHEMA_VERSION:
        raise MaskError(f"unsupported mask schema version {doc.get('schema_version')}")
    heads = {}
    for h in doc["heads"]:
        key = HeadKey(_kind(h["kind"]), h["layer"], h["head"])
        shape = (h["n_max"], h["m_max"])
        pruned = np.zeros(shape, dtype=bool)
        for i, j in h["pruned_pairs"]:
            pruned[i, j] = True
        avg_rows = h["avg"]
        visited = np.array([[v is not None for v in row] for row in avg_rows], dtype=bool)
        mean = np.array([[0.0 if v is None else v for v in row] for row in avg_rows],
                        dtype=np.float64).reshape(shape)
        heads[key] = HeadMask(pruned, visited.reshape(shape), mean,
                              [tuple(p) for p in h["rowkeep_pairs"]])
    thresholds = {(_kind(t["kind"]), t["layer"]): t["tau"] for t in doc["thresholds"]}
    ms = MaskSet(doc["windows"], doc["n_layers"], doc["n_heads"], heads, p=doc["p"],
                 kinds=doc["kinds"], source_dataset=doc["source_dataset"], seed=doc["seed"],
                 thresholds=thresholds, baseline=doc.get("baseline", "ap"))
    if config is not None:
        ms.check_compatible(config)
    return ms
