"""Pre-norm Transformer language model and encoder-decoder, plus checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from .attention import (AttentionConfig, AttentionKind, HeadKey, attention_param_shapes,
                        multi_head)
from .errors import CheckpointError, ShapeError
from .tensor import (Tensor, add, embedding_lookup, layer_norm, matmul, relu, reshape,
                     transpose)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
CHECKPOINT_VERSION = 1

Observer = Callable[[HeadKey, np.ndarray, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int
    attention: AttentionConfig
    d_ff: int
    vocab_size: int
    max_src_len: int
    max_tgt_len: int
    tie_embeddings: bool = True
    arch: str = "encdec"  # "lm" or "encdec"

    def __post_init__(self):
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionConfig(**self.attention))
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.max_src_len < 2 or self.max_tgt_len < 2:
            raise ValueError("maximum lengths must be >= 2")
        if self.arch not in ("lm", "encdec"):
            raise ValueError(f"unknown arch {self.arch!r}")

    @property
    def d_model(self):
        return self.attention.d_model

    @property
    def n_heads(self):
        return self.attention.n_heads

    @property
    def kinds(self) -> List[AttentionKind]:
        if self.arch == "lm":
            return [AttentionKind.SELF_DECODER]
        return [AttentionKind.SELF_ENCODER, AttentionKind.SELF_DECODER, AttentionKind.CROSS]

    def window(self, kind: AttentionKind):
        """(max queries, max keys) for attention of ``kind``."""
        kind = AttentionKind(kind)
        if kind is AttentionKind.SELF_ENCODER:
            return self.max_src_len, self.max_src_len
        if kind is AttentionKind.SELF_DECODER:
            return self.max_tgt_len, self.max_tgt_len
        return self.max_tgt_len, self.max_src_len

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Checkpoint:
    config: TransformerConfig
    seed: int
    weights: Dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, self.seed,
                          {k: v.copy() for k, v in self.weights.items()}, self.step)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.weights[name], dtype="<f8").tobytes())
        return h.hexdigest()


# ------------------------------------------------------------------ params


def param_shapes(config: TransformerConfig) -> Dict[str, tuple]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    att = attention_param_shapes(config.attention)
    shapes = {"tok_emb": (v, d)}

    def block(prefix, parts):
        for part in parts:
            if part.startswith("ln"):
                shapes[f"{prefix}.{part}.g"] = (d,)
                shapes[f"{prefix}.{part}.b"] = (d,)
            elif part == "ff":
                shapes.update({f"{prefix}.ff.w1": (d, f), f"{prefix}.ff.b1": (f,),
                               f"{prefix}.ff.w2": (f, d), f"{prefix}.ff.b2": (d,)})
            else:
                shapes.update({f"{prefix}.{part}.{k}": s for k, s in att.items()})

    if config.arch == "lm":
        shapes["tgt_pos_emb"] = (config.max_tgt_len, d)
        for layer in range(config.n_layers):
            block(f"dec.{layer}", ["ln1", "self", "ln2", "ff"])
    else:
        shapes["src_pos_emb"] = (config.max_src_len, d)
        shapes["tgt_pos_emb"] = (config.max_tgt_len, d)
        for layer in range(config.n_layers):
            block(f"enc.{layer}", ["ln1", "self", "ln2", "ff"])
        shapes["enc.ln_f.g"] = (d,)
        shapes["enc.ln_f.b"] = (d,)
        for layer in range(config.n_layers):
            block(f"dec.{layer}", ["ln1", "self", "ln2", "cross", "ln3", "ff"])
    shapes["dec.ln_f.g"] = (d,)
    shapes["dec.ln_f.b"] = (d,)
    if not config.tie_embeddings:
        shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


def init_params(config: TransformerConfig, seed: int) -> Checkpoint:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith("emb"):
            w = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            w = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            w = np.ones(shape)
        else:
            w = np.zeros(shape)
        weights[name] = w
    return Checkpoint(config, seed, weights, 0)


def as_params(source: Union[Checkpoint, Dict[str, Tensor]]) -> Dict[str, Tensor]:
    if isinstance(source, Checkpoint):
        return {k: Tensor(v) for k, v in source.weights.items()}
    return source


# ----------------------------------------------------------------- forward


def _sub(params, prefix):
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _ln(params, prefix, x):
    return layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def _ffn(params, prefix, x):
    h = relu(add(matmul(x, params[prefix + ".w1"]), params[prefix + ".b1"]))
    return add(matmul(h, params[prefix + ".w2"]), params[prefix + ".b2"])


def _embed(params, ids, pos_name):
    n = ids.shape[-1]
    return add(embedding_lookup(params["tok_emb"], ids), embedding_lookup(params[pos_name],
                                                                         np.arange(n)))


def _project_out(params, config, x):
    if config.tie_embeddings:
        w = transpose(params["tok_emb"], (1, 0))
    else:
        w = params["out.w"]
    return add(matmul(x, w), params["out.b"])


def _lengths(valid):
    return valid.sum(axis=-1)


def _report(observer, kind, layer, weights, q_valid, k_valid):
    for b in range(weights.shape[0]):
        for h in range(weights.shape[1]):
            observer(HeadKey(kind, layer, h), weights[b, h], q_valid[b], k_valid[b])


def _attend(params, prefix, config, kind, layer, x_q, x_kv, q_valid, k_valid, masks, observer,
            causal):
    n, m = x_q.shape[-2], x_kv.shape[-2]
    head_masks = None
    if masks is not None:
        head_masks = masks.layer_window(kind, layer, n, m, causal=causal,
                                        query_lengths=_lengths(q_valid),
                                        key_lengths=_lengths(k_valid))
    hook = None
    if observer is not None:
        hook = lambda w: _report(observer, kind, layer, w, q_valid, k_valid)  # noqa: E731
    return multi_head(x_q, x_kv, _sub(params, prefix), config.attention, head_masks=head_masks,
                      causal=causal, key_valid=k_valid, observer=hook)


def _batched(ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        return ids[None, :], True
    return ids, False


def _decoder(params, config, tgt, memory, src_valid, masks, observer):
    tgt_valid = tgt != PAD_ID
    x = _embed(params, tgt, "tgt_pos_emb")
    for layer in range(config.n_layers):
        p = f"dec.{layer}"
        x = add(x, _self_attend(params, p, config, AttentionKind.SELF_DECODER, layer, x,
                                tgt_valid, masks, observer, causal=True))
        if memory is not None:
            h = _ln(params, p + ".ln2", x)
            x = add(x, _attend(params, p + ".cross", config, AttentionKind.CROSS, layer, h,
                               memory, tgt_valid, src_valid, masks, observer, causal=False))
            x = add(x, _ffn(params, p + ".ff", _ln(params, p + ".ln3", x)))
        else:
            x = add(x, _ffn(params, p + ".ff", _ln(params, p + ".ln2", x)))
    return _project_out(params, config, _ln(params, "dec.ln_f", x))


def _self_attend(params, prefix, config, kind, layer, x, valid, masks, observer, causal):
    h = _ln(params, prefix + ".ln1", x)
    return _attend(params, prefix + ".self", config, kind, layer, h, h, valid, valid, masks,
                   observer, causal)


def _encoder(params, config, src, masks, observer):
    src_valid = src != PAD_ID
    x = _embed(params, src, "src_pos_emb")
    for layer in range(config.n_layers):
        p = f"enc.{layer}"
        x = add(x, _self_attend(params, p, config, AttentionKind.SELF_ENCODER, layer, x,
                                src_valid, masks, observer, causal=False))
        x = add(x, _ffn(params, p + ".ff", _ln(params, p + ".ln2", x)))
    return _ln(params, "enc.ln_f", x), src_valid


def lm_forward(ckpt, tokens, masks=None, observer: Optional[Observer] = None,
               config: Optional[TransformerConfig] = None) -> Tensor:
    """Causal LM logits [n, V] (or [B, n, V] for a batch of token rows)."""
    config = config or ckpt.config
    tokens, single = _batched(tokens)
    if tokens.shape[-1] > config.max_tgt_len:
        raise ShapeError(f"sequence of {tokens.shape[-1]} exceeds max_tgt_len {config.max_tgt_len}")
    logits = _decoder(as_params(ckpt), config, tokens, None, None, masks, observer)
    return _unbatch(logits, single)


def seq2seq_forward(ckpt, src, tgt_in, masks=None, observer: Optional[Observer] = None,
                    config: Optional[TransformerConfig] = None) -> Tensor:
    """Teacher-forced decoder logits [m, V] (or [B, m, V])."""
    config = config or ckpt.config
    src, single = _batched(src)
    tgt_in, _ = _batched(tgt_in)
    if src.shape[-1] > config.max_src_len or tgt_in.shape[-1] > config.max_tgt_len:
        raise ShapeError("sequence exceeds the configured maximum length")
    params = as_params(ckpt)
    memory, src_valid = _encoder(params, config, src, masks, observer)
    logits = _decoder(params, config, tgt_in, memory, src_valid, masks, observer)
    return _unbatch(logits, single)


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return reshape(t, t.shape[1:]) if single else t


def greedy_decode(ckpt, src, bos_id: int = BOS_ID, eos_id: int = EOS_ID, max_len: int = 0,
                  masks=None) -> Union[List[int], List[List[int]]]:
    """Argmax decoding; returns generated ids (without bos, with eos when produced).

    ``src`` may be a batch [B, n] of equal-length sources; then a list per row comes back.
    """
    config = ckpt.config
    max_len = max_len or config.max_tgt_len
    if max_len > config.max_tgt_len:
        raise ShapeError(f"max_len {max_len} exceeds max_tgt_len {config.max_tgt_len}")
    src, single = _batched(src)
    params = as_params(ckpt)
    memory, src_valid = _encoder(params, config, src, masks, None)
    batch = src.shape[0]
    prefix = np.full((batch, 1), bos_id, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    outputs: List[List[int]] = [[] for _ in range(batch)]
    for _ in range(max_len):
        # the prefix can only grow to max_len inputs
        if prefix.shape[1] > config.max_tgt_len:
            break
        logits = _decoder(params, config, prefix, memory, src_valid, masks, None).data[:, -1]
        nxt = logits.argmax(axis=-1)
        for b in range(batch):
            if not done[b]:
                outputs[b].append(int(nxt[b]))
                done[b] = nxt[b] == eos_id
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outputs[0] if single else outputs


# -------------------------------------------------------------- checkpoints


def _checksum(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def _payload_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``path`` (JSON metadata) and its ``.bin`` sibling (little-endian float64)."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.weights):
        arr = np.ascontiguousarray(ckpt.weights[name], dtype="<f8")
        buf = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "checksum": _checksum(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    meta = {"format_version": CHECKPOINT_VERSION, "config": ckpt.config.to_dict(),
            "seed": ckpt.seed, "step": ckpt.step, "payload_bytes": len(payload),
            "payload_checksum": _checksum(payload), "weights": entries}
    path.parent.mkdir(parents=True, exist_ok=True)
    _payload_path(path).write_bytes(payload)
    path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint metadata {path}: {exc}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('format_version')}")
    try:
        payload = _payload_path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"missing checkpoint payload: {exc}") from None
    if len(payload) != meta["payload_bytes"] or _checksum(payload) != meta["payload_checksum"]:
        raise CheckpointError("checkpoint payload is truncated or corrupt")
    config = TransformerConfig.from_dict(meta["config"])
    expected = param_shapes(config)
    weights = {}
    for entry in meta["weights"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"weight {name} has shape {shape}, config implies "
                                  f"{expected.get(name)}")
        size = int(np.prod(shape)) * 8
        buf = payload[entry["offset"]:entry["offset"] + size]
        if len(buf) != size or _checksum(buf) != entry["checksum"]:
            raise CheckpointError(f"checksum mismatch for weight {name}")
        weights[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
    if set(weights) != set(expected):
        raise CheckpointError("checkpoint weight names do not match the config")
    return Checkpoint(config, meta["seed"], weights, meta["step"])
