"""Synthetic seq2seq tasks, character-level corpus ingestion and batching."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    def __init__(self, symbols: Sequence[str]):
        self.symbols = list(RESERVED) + [s for s in symbols if s not in RESERVED]
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")

    def __len__(self):
        return len(self.symbols)

    def encode(self, tokens) -> List[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids) -> List[str]:
        return [self.symbols[i] for i in ids]


@dataclass
class Dataset:
    kind: str  # "lm" or "pairs"
    examples: list
    split: str = "train"
    name: str = ""

    def __len__(self):
        return len(self.examples)


@dataclass
class TaskData:
    name: str
    vocab: Vocab
    train: Dataset
    valid: Dataset
    test: Dataset
    max_src_len: int
    max_tgt_len: int
    meta: dict = field(default_factory=dict)

    def split(self, name) -> Dataset:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


def _split_pairs(name, vocab, pairs, meta=None) -> TaskData:
    n = len(pairs)
    a, b = int(n * 0.8), int(n * 0.9)
    max_src = max(len(s) for s, _ in pairs)
    max_tgt = max(len(t) for _, t in pairs)
    return TaskData(name, vocab, Dataset("pairs", pairs[:a], "train", name),
                    Dataset("pairs", pairs[a:b], "valid", name),
                    Dataset("pairs", pairs[b:], "test", name),
                    max_src, max_tgt - 1, meta or {})


def _symbol_vocab(alphabet_size):
    return Vocab([f"s{i}" for i in range(alphabet_size)])


def _random_sources(rng, count, len_min, len_max, alphabet_size):
    lengths = rng.integers(len_min, len_max + 1, size=count)
    return [rng.integers(0, alphabet_size, size=int(n)) + len(RESERVED) for n in lengths]


def gen_copy(count: int, len_min: int, len_max: int, alphabet_size: int, seed: int) -> TaskData:
    if len_min < 1 or len_max < len_min or alphabet_size < 2:
        raise ValueError("need 1 <= len_min <= len_max and alphabet_size >= 2")
    rng = np.random.default_rng(seed)
    pairs = [(src.tolist(), [BOS_ID] + src.tolist() + [EOS_ID])
             for src in _random_sources(rng, count, len_min, len_max, alphabet_size)]
    return _split_pairs("copy", _symbol_vocab(alphabet_size), pairs)


def gen_reverse(count: int, len_min: int, len_max: int, alphabet_size: int,
                seed: int) -> TaskData:
    if len_min < 1 or len_max < len_min or alphabet_size < 2:
        raise ValueError("need 1 <= len_min <= len_max and alphabet_size >= 2")
    rng = np.random.default_rng(seed)
    pairs = [(src.tolist(), [BOS_ID] + src[::-1].tolist() + [EOS_ID])
             for src in _random_sources(rng, count, len_min, len_max, alphabet_size)]
    return _split_pairs("reverse", _symbol_vocab(alphabet_size), pairs)


TRANSLATION_ALPHABET = 20
TRANSLATION_LENGTHS = (5, 16)


def gen_toy_translation(count: int, seed: int) -> TaskData:
    """Substitution cipher whose last target token re-encodes the first source token."""
    rng = np.random.default_rng(seed)
    a = TRANSLATION_ALPHABET
    src_vocab = [f"x{i}" for i in range(a)]
    tgt_vocab = [f"y{i}" for i in range(a)]
    vocab = Vocab(src_vocab + tgt_vocab)
    cipher = rng.permutation(a)
    offset = len(RESERVED)
    pairs = []
    for src in _random_sources(rng, count, *TRANSLATION_LENGTHS, a):
        sym = src - offset
        out = cipher[sym] + offset + a
        out[-1] = cipher[sym[0]] + offset + a
        pairs.append((src.tolist(), [BOS_ID] + out.tolist() + [EOS_ID]))
    meta = {"cipher": cipher.tolist()}
    return _split_pairs("toy-translation", vocab, pairs, meta)


def char_lm_ingest(path, max_chars: Optional[int] = None, seq_len: int = 32,
                   vocab: Optional[Vocab] = None) -> TaskData:
    """Character stream split 90/5/5 contiguously; reuse ``vocab`` to map unseen chars to unk."""
    text = Path(path).read_text(encoding="utf-8")
    if max_chars is not None:
        text = text[:max_chars]
    if not text:
        raise ValueError(f"corpus {path} is empty")
    if vocab is None:
        vocab = Vocab(sorted(set(text)))
    ids = vocab.encode(text)
    n = len(ids)
    a, b = int(n * 0.9), int(n * 0.95)
    return TaskData("char-lm", vocab, Dataset("lm", ids[:a], "train", "char-lm"),
                    Dataset("lm", ids[a:b], "valid", "char-lm"),
                    Dataset("lm", ids[b:], "test", "char-lm"), seq_len, seq_len,
                    {"chars": n})


# ------------------------------------------------------------------ batches


@dataclass
class Batch:
    src: Optional[np.ndarray]  # [B, n] (pairs only)
    tgt_in: np.ndarray  # [B, m]
    tgt_out: np.ndarray  # [B, m]
    src_valid: Optional[np.ndarray]
    tgt_valid: np.ndarray

    @property
    def size(self):
        return self.tgt_in.shape[0]


def _pad(rows, width):
    out = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for r, row in enumerate(rows):
        out[r, :len(row)] = row
    return out


def lm_segments(stream: Sequence[int], max_len: int) -> List[List[int]]:
    """Contiguous windows of ``max_len + 1`` ids (input plus shifted target)."""
    step = max_len
    return [list(stream[i:i + max_len + 1]) for i in range(0, max(len(stream) - 1, 0), step)
            if len(stream[i:i + max_len + 1]) >= 2]


def make_batches(dataset: Dataset, batch_size: int, max_len: int, seed: int = 0,
                 epoch: int = 0, shuffle: bool = True) -> List[Batch]:
    """Batches for one epoch; pairs are bucketed by (source, target) length."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    if dataset.kind == "lm":
        segs = lm_segments(dataset.examples, max_len)
        order = rng.permutation(len(segs)) if shuffle else np.arange(len(segs))
        batches = []
        for start in range(0, len(segs), batch_size):
            rows = [segs[i] for i in order[start:start + batch_size]]
            width = max(len(r) for r in rows) - 1
            tin = _pad([r[:-1] for r in rows], width)
            tout = _pad([r[1:] for r in rows], width)
            batches.append(Batch(None, tin, tout, None, tin != PAD_ID))
        return batches

    buckets: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    for idx, (src, tgt) in enumerate(dataset.examples):
        buckets[(len(src), len(tgt))].append(idx)
    chunks = []
    for key in sorted(buckets):
        idxs = buckets[key]
        if shuffle:
            idxs = [idxs[i] for i in rng.permutation(len(idxs))]
        for start in range(0, len(idxs), batch_size):
            chunks.append(idxs[start:start + batch_size])
    order = rng.permutation(len(chunks)) if shuffle else np.arange(len(chunks))
    batches = []
    for c in order:
        rows = [dataset.examples[i] for i in chunks[c]]
        batches.append(pair_batch(rows))
    return batches


def pair_batch(rows) -> Batch:
    src = _pad([s for s, _ in rows], max(len(s) for s, _ in rows))
    width = max(len(t) for _, t in rows) - 1
    tin = _pad([t[:-1] for _, t in rows], width)
    tout = _pad([t[1:] for _, t in rows], width)
    return Batch(src, tin, tout, src != PAD_ID, tin != PAD_ID)


def export_text(dataset: Dataset, vocab: Vocab, path) -> None:
    """One example per line: tokens space-separated, source and target tab-separated."""
    lines = []
    if dataset.kind == "lm":
        lines.append(" ".join(vocab.decode(dataset.examples)))
    else:
        for src, tgt in dataset.examples:
            lines.append(" ".join(vocab.decode(src)) + "\t" + " ".join(vocab.decode(tgt)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
