"""Adam training loops, evaluation metrics and the end-to-end pruning experiment."""
from __future__ import annotations

import csv
import io
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cost import mac_fraction
from .data import Batch, Dataset, TaskData, make_batches
from .errors import NumericalError
from .model import (BOS_ID, EOS_ID, PAD_ID, Checkpoint, TransformerConfig, greedy_decode,
                    init_params, lm_forward, seq2seq_forward)
from .pruning import (AttentionStats, MaskSet, PruneSpec, average, build_masks, mask_sparsity,
                      random_masks)
from .tensor import Tape, Tensor, cross_entropy

LOG_COLUMNS = ("step", "split", "loss", "ppl_or_acc", "bleu", "lr", "wall_ms")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    weight_decay: float = 0.0
    clip: float = 1.0
    batch_size: int = 32
    max_steps: int = 2000
    max_epochs: Optional[int] = None
    warmup_steps: int = 100
    seed: int = 0
    eval_every: int = 200
    stop_at_valid_acc: Optional[float] = None  # early exit once validation accuracy reaches this
    eval_bleu: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not (0 < self.betas[0] < 1 and 0 < self.betas[1] < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.clip <= 0:
            raise ValueError("clip must be positive")


@dataclass
class OptimState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def learning_rate(config: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr`` then inverse-square-root decay; constant without warmup."""
    w = config.warmup_steps
    if w <= 0:
        return config.lr
    return config.lr * min(step / w, math.sqrt(w / step))


def clip_grads(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; return the old norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def adam_step(weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState,
              config: TrainConfig) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam update after global-norm clipping (weights updated in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name} at step {state.step + 1}")
    grads = {k: g.copy() for k, g in grads.items()}
    clip_grads(grads, config.clip)
    state.step += 1
    t = state.step
    b1, b2 = config.betas
    lr = learning_rate(config, t)
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if config.weight_decay:
            w -= lr * config.weight_decay * w
        w -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return weights, state


# ------------------------------------------------------------ forward glue


def batch_logits(model, batch: Batch, masks=None, params=None):
    """Logits tensor [B, m, V] for a batch; ``model`` may be a Checkpoint or a stub
    exposing ``batch_logits(batch, masks)``."""
    if hasattr(model, "batch_logits"):
        return model.batch_logits(batch, masks)
    source = params if params is not None else model
    if model.config.arch == "lm":
        return lm_forward(source, batch.tgt_in, masks, config=model.config)
    return seq2seq_forward(source, batch.src, batch.tgt_in, masks, config=model.config)


def _batch_loss(model, batch, masks, params):
    logits = batch_logits(model, batch, masks, params)
    return cross_entropy(logits, batch.tgt_out, ignore_id=PAD_ID)


# ----------------------------------------------------------------- metrics


@dataclass
class EvalMetrics:
    loss: float
    perplexity: float
    token_accuracy: float
    bleu: Optional[float]
    examples: int

    def to_dict(self):
        return asdict(self)


def _ngrams(seq, n):
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU-4 in [0, 100] with a 1e-16 floor on each modified precision."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    hits = [0] * max_n
    totals = [0] * max_n
    ref_totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            hits[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            ref_totals[n - 1] += max(len(ref) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        if totals[n] == 0:
            prec = 1.0 if ref_totals[n] == 0 else 1e-16
        else:
            prec = max(hits[n] / totals[n], 1e-16)
        log_p += math.log(prec) / max_n
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p)


def _strip(ids):
    out = []
    for t in ids:
        if t == EOS_ID:
            break
        if t not in (PAD_ID, BOS_ID):
            out.append(int(t))
    return out


def _eval_batches(dataset: Dataset, batch_size: int, max_len: int):
    return make_batches(dataset, batch_size, max_len, shuffle=False)


def evaluate(model, dataset: Dataset, masks=None, batch_size: int = 64, max_len: int = 32,
             with_bleu: bool = False) -> EvalMetrics:
    """Teacher-forced loss/accuracy over non-pad targets, optional greedy-decoding BLEU."""
    if len(dataset) == 0:
        raise ValueError("empty evaluation split")
    nll_parts, correct, count, examples = [], 0, 0, 0
    for batch in _eval_batches(dataset, batch_size, max_len):
        logits = np.asarray(batch_logits(model, batch, masks).data)
        valid = batch.tgt_out != PAD_ID
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        picked = np.take_along_axis(z, batch.tgt_out[..., None], axis=-1)[..., 0]
        nll_parts.append((lse - picked)[valid])
        correct += int(((logits.argmax(axis=-1) == batch.tgt_out) & valid).sum())
        count += int(valid.sum())
        examples += batch.size
    if count == 0:
        raise ValueError("evaluation split has no target tokens")
    loss = float(math.fsum(np.concatenate(nll_parts)) / count)
    score = None
    if with_bleu and dataset.kind == "pairs":
        hyps, refs = decode_dataset(model, dataset, masks, batch_size)
        score = bleu(hyps, refs)
    return EvalMetrics(loss, math.exp(loss), correct / count, score, examples)


def decode_dataset(model, dataset: Dataset, masks=None, batch_size: int = 64):
    hyps, refs = [], []
    by_len: Dict[int, List[int]] = {}
    for idx, (src, _) in enumerate(dataset.examples):
        by_len.setdefault(len(src), []).append(idx)
    out: Dict[int, List[int]] = {}
    for _, idxs in sorted(by_len.items()):
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start:start + batch_size]
            src = np.array([dataset.examples[i][0] for i in chunk], dtype=np.int64)
            max_len = min(model.config.max_tgt_len,
                          max(len(dataset.examples[i][1]) for i in chunk) + 2)
            for i, ids in zip(chunk, greedy_decode(model, src, max_len=max_len, masks=masks)):
                out[i] = ids
    for idx, (_, tgt) in enumerate(dataset.examples):
        hyps.append(_strip(out[idx]))
        refs.append(_strip(tgt))
    return hyps, refs


def perplexity(model, dataset: Dataset, masks=None, batch_size: int = 64,
               max_len: int = 32) -> EvalMetrics:
    return evaluate(model, dataset, masks, batch_size, max_len)


def token_accuracy(model, dataset: Dataset, masks=None, batch_size: int = 64,
                   max_len: int = 32) -> float:
    return evaluate(model, dataset, masks, batch_size, max_len).token_accuracy


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    rows: List[dict] = field(default_factory=list)
    status: str = "ok"
    steps: int = 0
    best_step: int = 0
    wall_ms: float = 0.0

    def to_csv(self, with_wall: bool = True) -> str:
        buf = io.StringIO()
        cols = LOG_COLUMNS if with_wall else LOG_COLUMNS[:-1]
        writer = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore",
                                lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in cols})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _selection_key(arch, metrics: EvalMetrics):
    # larger is better
    if arch == "lm" or metrics.bleu is None:
        return (-metrics.loss,)
    return (metrics.bleu, -metrics.loss)


def train(ckpt: Checkpoint, task: TaskData, config: TrainConfig,
          maskset: Optional[MaskSet] = None) -> Tuple[Checkpoint, TrainLog]:
    """Minimise cross-entropy; returns the best checkpoint by validation score and the log."""
    expected = "lm" if ckpt.config.arch == "lm" else "pairs"
    if task.train.kind != expected:
        raise ValueError(f"{task.train.kind} data cannot train a {ckpt.config.arch} model")
    if maskset is not None:
        maskset.check_compatible(ckpt.config)
    arch = ckpt.config.arch
    seq_len = ckpt.config.max_tgt_len
    work = ckpt.copy()
    state = OptimState()
    log = TrainLog()
    best, best_key = work.copy(), None
    t0 = time.perf_counter()
    step = 0
    epoch = 0
    window_loss = []
    use_bleu = config.eval_bleu and arch != "lm"
    done = False
    while not done:
        if config.max_epochs is not None and epoch >= config.max_epochs:
            break
        for batch in make_batches(task.train, config.batch_size, seq_len, config.seed, epoch):
            params = {k: Tensor(v, requires_grad=True) for k, v in work.weights.items()}
            with Tape() as tape:
                loss = _batch_loss(work, batch, maskset, params)
                lval = float(loss.data)
                if not math.isfinite(lval):
                    log.status = "diverged"
                    done = True
                    break
                grads = tape.backward(loss)
            named = {k: grads[t] for k, t in params.items() if t in grads}
            try:
                adam_step(work.weights, named, state, config)
            except NumericalError:
                log.status = "diverged"
                done = True
                break
            step += 1
            work.step = step
            window_loss.append(lval)
            if step % config.eval_every == 0 or step == config.max_steps:
                metrics = evaluate(work, task.valid, maskset, max_len=seq_len,
                                   with_bleu=use_bleu)
                ms = (time.perf_counter() - t0) * 1000
                train_loss = float(np.mean(window_loss))
                window_loss = []
                log.rows.append({"step": step, "split": "train", "loss": train_loss,
                                 "ppl_or_acc": math.exp(min(train_loss, 700.0)), "bleu": None,
                                 "lr": learning_rate(config, step), "wall_ms": round(ms, 1)})
                log.rows.append({"step": step, "split": "valid", "loss": metrics.loss,
                                 "ppl_or_acc": metrics.perplexity if arch == "lm"
                                 else metrics.token_accuracy,
                                 "bleu": metrics.bleu, "lr": learning_rate(config, step),
                                 "wall_ms": round(ms, 1)})
                key = _selection_key(arch, metrics)
                if best_key is None or key > best_key:
                    best, best_key = work.copy(), key
                    log.best_step = step
                if (config.stop_at_valid_acc is not None and arch != "lm"
                        and metrics.token_accuracy >= config.stop_at_valid_acc):
                    done = True
                    break
            if step >= config.max_steps:
                done = True
                break
        epoch += 1
    if best_key is None and log.status == "ok" and step > 0:
        best = work.copy()
        log.best_step = step
    log.steps = step
    log.wall_ms = (time.perf_counter() - t0) * 1000
    return best, log


# ------------------------------------------------------------- statistics


def collect_stats(ckpt: Checkpoint, dataset: Dataset, batch_size: int = 64,
                  masks: Optional[MaskSet] = None) -> AttentionStats:
    """Accumulate average-attention statistics of ``ckpt`` over ``dataset`` (one pass)."""
    if len(dataset) == 0:
        raise ValueError("cannot collect statistics over an empty split")
    stats = AttentionStats.for_config(ckpt.config)
    stats.source = ckpt.digest()
    seq_len = ckpt.config.max_tgt_len
    for batch in make_batches(dataset, batch_size, seq_len, shuffle=False):
        if ckpt.config.arch == "lm":
            lm_forward(ckpt, batch.tgt_in, masks, observer=stats)
        else:
            seq2seq_forward(ckpt, batch.src, batch.tgt_in, masks, observer=stats)
        stats.examples_seen += batch.size
    return stats


# -------------------------------------------------------------- experiment


@dataclass
class ExperimentReport:
    task: str
    seed: int
    p: float
    kinds: List[str]
    retrain_mode: str
    baseline_type: str
    baseline: dict
    pruned: dict
    sparsity: dict
    thresholds: List[dict]
    mac_fraction: float
    eval_length: float
    baseline_checkpoint: str
    stats_checkpoint: str
    stats_examples: int
    steps: dict
    wall_ms: dict = field(default_factory=dict)

    def to_dict(self, with_wall: bool = True):
        d = asdict(self)
        if not with_wall:
            d.pop("wall_ms")
        return d


@dataclass
class BaselineRun:
    init: Checkpoint
    best: Checkpoint
    log: TrainLog
    test: EvalMetrics
    stats: Optional[AttentionStats] = None


def _test_metrics(model, task, masks, config):
    return evaluate(model, task.test, masks, max_len=model.config.max_tgt_len,
                    with_bleu=model.config.arch != "lm" and config.eval_bleu)


def train_baseline(model_config: TransformerConfig, task: TaskData, config: TrainConfig,
                   init_seed: Optional[int] = None) -> BaselineRun:
    init = init_params(model_config, config.seed if init_seed is None else init_seed)
    best, log = train(init, task, config)
    return BaselineRun(init, best, log, _test_metrics(best, task, None, config))


def eval_length(task: TaskData) -> float:
    lengths = [len(t) - 1 for _, t in task.test.examples] if task.test.kind == "pairs" \
        else [task.max_tgt_len]
    return float(np.median(lengths))


def prune_and_retrain(base: BaselineRun, task: TaskData, spec: PruneSpec, config: TrainConfig,
                      retrain_mode: str = "fresh", baseline_type: str = "ap",
                      maskset: Optional[MaskSet] = None, random_seed: Optional[int] = None,
                      ) -> Tuple[ExperimentReport, Checkpoint, MaskSet]:
    """Steps 2-4 on top of a trained baseline."""
    t0 = time.perf_counter()
    if base.stats is None:
        base.stats = collect_stats(base.best, task.train)
    avg = average(base.stats)
    if maskset is None:
        if baseline_type == "random":
            maskset = random_masks(avg, spec.p, config.seed if random_seed is None
                                   else random_seed, kinds=spec.kinds)
        else:
            maskset = build_masks(avg, spec, source_dataset=task.name)
    else:
        maskset.check_compatible(base.best.config)
    if retrain_mode == "fresh":
        start = base.init
    elif retrain_mode == "finetune":
        start = base.best
    else:
        raise ValueError(f"unknown retrain mode {retrain_mode!r}")
    t1 = time.perf_counter()
    pruned, log = train(start, task, config, maskset)
    test = _test_metrics(pruned, task, maskset, config)
    sparsity = mask_sparsity(maskset)
    d = base.best.config.d_model
    n_eval = eval_length(task)
    report = ExperimentReport(
        task=task.name, seed=config.seed, p=spec.p, kinds=[k.value for k in spec.kinds],
        retrain_mode=retrain_mode, baseline_type=baseline_type,
        baseline=base.test.to_dict(), pruned=test.to_dict(), sparsity=sparsity,
        thresholds=[{"kind": k.value, "layer": l, "tau": t}
                    for (k, l), t in sorted(maskset.thresholds.items(),
                                            key=lambda kv: (kv[0][0].value, kv[0][1]))],
        mac_fraction=mac_fraction(d, max(1, int(round(n_eval))), sparsity["overall"]),
        eval_length=n_eval, baseline_checkpoint=base.best.digest(),
        stats_checkpoint=base.stats.source, stats_examples=base.stats.examples_seen,
        steps={"baseline": base.log.steps, "baseline_best": base.log.best_step,
               "pruned": log.steps, "pruned_best": log.best_step},
        wall_ms={"baseline": round(base.log.wall_ms, 1),
                 "mask": round((t1 - t0) * 1000, 1), "retrain": round(log.wall_ms, 1)})
    return report, pruned, maskset


def run_ap(model_config: TransformerConfig, task: TaskData, spec: PruneSpec,
           config: TrainConfig, retrain_mode: str = "fresh",
           baseline_type: str = "ap") -> ExperimentReport:
    """Train, collect average attention, build masks, retrain under them."""
    base = train_baseline(model_config, task, config)
    report, _, _ = prune_and_retrain(base, task, spec, config, retrain_mode, baseline_type)
    return report
