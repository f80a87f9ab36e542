import math

import numpy as np
import pytest

from attnprune.attention import AttentionConfig, AttentionKind
from attnprune.data import Dataset, gen_copy
from attnprune.errors import NumericalError
from attnprune.model import TransformerConfig, init_params
from attnprune.pruning import MaskSet, PruneSpec
from attnprune.tensor import Tensor
from attnprune.train import (OptimState, TrainConfig, adam_step, bleu, clip_grads,
                             collect_stats, evaluate, learning_rate, perplexity,
                             prune_and_retrain, token_accuracy, train, train_baseline)

from oracles import bleu_ref


class Stub:
    """Model double whose logits are a function of the batch only."""

    def __init__(self, fn):
        self.fn = fn

    def batch_logits(self, batch, masks=None):
        return Tensor(self.fn(batch))


def lm_data(stream):
    return Dataset("lm", list(stream), "test", "stub")


def pair_data(pairs):
    return Dataset("pairs", list(pairs), "test", "stub")


class TestAdam:
    def test_hand_step(self):
        w = {"t": np.zeros(1)}
        cfg = TrainConfig(lr=0.1, betas=(0.9, 0.999), eps=1e-8, warmup_steps=0, clip=10.0)
        adam_step(w, {"t": np.ones(1)}, OptimState(), cfg)
        assert w["t"][0] == pytest.approx(-0.1, abs=1e-8)

    def test_zero_gradient(self):
        w = {"t": np.array([0.5, -1.0])}
        cfg = TrainConfig(lr=0.1, warmup_steps=0)
        adam_step(w, {"t": np.zeros(2)}, OptimState(), cfg)
        assert w["t"].tolist() == [0.5, -1.0]

    def test_moments_decay(self):
        w = {"t": np.zeros(1)}
        state = OptimState()
        cfg = TrainConfig(lr=0.1, betas=(0.9, 0.999), warmup_steps=0)
        adam_step(w, {"t": np.ones(1)}, state, cfg)
        m, v = state.m["t"].copy(), state.v["t"].copy()
        adam_step(w, {"t": np.zeros(1)}, state, cfg)
        assert state.m["t"][0] == pytest.approx(0.9 * m[0])
        assert state.v["t"][0] == pytest.approx(0.999 * v[0])

    def test_clipping(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grads(grads, 1.0) == 5.0
        norm = math.sqrt(grads["a"][0] ** 2 + grads["b"][0] ** 2)
        assert norm == pytest.approx(1.0)
        assert grads["a"][0] / grads["b"][0] == pytest.approx(0.75)

    def test_no_clip_below_norm(self):
        grads = {"a": np.array([0.3]), "b": np.array([0.4])}
        clip_grads(grads, 1.0)
        assert grads["a"][0] == 0.3

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            adam_step({"t": np.zeros(1)}, {"t": np.array([np.nan])}, OptimState(), TrainConfig())

    def test_schedule(self):
        cfg = TrainConfig(lr=1.0, warmup_steps=4)
        assert [learning_rate(cfg, s) for s in (1, 2, 4, 16)] == [0.25, 0.5, 1.0, 0.5]
        assert learning_rate(TrainConfig(lr=0.3, warmup_steps=0), 99) == 0.3

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(betas=(1.0, 0.9))
        with pytest.raises(ValueError):
            TrainConfig(clip=0)


class TestBleu:
    def test_identical(self):
        refs = [[4, 5, 6, 7, 8], [9, 10, 11, 12]]
        assert bleu(refs, refs) == 100.0

    def test_disjoint(self):
        assert bleu([[20, 21, 22, 23]], [[4, 5, 6, 7]]) < 1e-10

    def test_worked_sentence(self):
        hyp = "the cat sat on the mat".split()
        ref = "the cat sat on a mat".split()
        # clipped matches by order: 5/6, 3/5, 2/4, 1/3; brevity penalty 1
        expected = 100 * (5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25
        assert bleu([hyp], [ref]) == pytest.approx(expected, abs=1e-9)
        assert bleu_ref([hyp], [ref]) == pytest.approx(expected, abs=1e-9)

    def test_matches_reference_on_random_corpus(self):
        rng = np.random.default_rng(2)
        refs = [list(rng.integers(4, 8, size=rng.integers(4, 12))) for _ in range(30)]
        hyps = [list(rng.integers(4, 8, size=rng.integers(4, 12))) for _ in range(30)]
        assert bleu(hyps, refs) == pytest.approx(bleu_ref(hyps, refs), abs=1e-9)

    def test_brevity_penalty(self):
        ref = [4, 5, 6, 7, 8, 9]
        hyp = [4, 5, 6, 7]
        assert bleu([hyp], [ref]) == pytest.approx(100 * math.exp(1 - 6 / 4))

    def test_order_and_relabel_invariance(self):
        rng = np.random.default_rng(0)
        refs = [list(rng.integers(4, 10, size=rng.integers(4, 9))) for _ in range(20)]
        hyps = [[t if rng.random() < 0.7 else 11 for t in r] for r in refs]
        base = bleu(hyps, refs)
        perm = rng.permutation(20)
        assert bleu([hyps[i] for i in perm], [refs[i] for i in perm]) == pytest.approx(base,
                                                                                      abs=1e-12)
        relabel = {t: 100 - t for t in range(20)}
        assert bleu([[relabel[t] for t in h] for h in hyps],
                    [[relabel[t] for t in r] for r in refs]) == pytest.approx(base, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            bleu([], [])


class TestPerplexity:
    def test_uniform(self):
        stub = Stub(lambda b: np.zeros(b.tgt_in.shape + (4,)))
        assert perplexity(stub, lm_data([1, 2, 3, 1, 2, 3, 1])).perplexity == pytest.approx(4.0)

    def test_perfect(self):
        def fn(b):
            out = np.zeros(b.tgt_out.shape + (6,))
            np.put_along_axis(out, b.tgt_out[..., None], 20.0, axis=-1)
            return out
        assert perplexity(Stub(fn), lm_data([4, 5, 4, 5, 4])).perplexity < 1.001

    def test_hand_three_tokens(self):
        # stream 4 5 4 5 gives targets 5, 4, 5 with fixed logits rows
        rows = np.array([[0.0, 0.0, 0.0, 0.0, 1.0, 2.0],
                         [0.0, 0.0, 0.0, 0.0, 3.0, 0.0],
                         [0.0, 0.0, 0.0, 0.0, 0.5, 0.5]])
        stub = Stub(lambda b: rows[None])
        lse = np.log(np.exp(rows).sum(axis=1))
        nll = (lse[0] - 2.0) + (lse[1] - 3.0) + (lse[2] - 0.5)
        got = perplexity(stub, lm_data([4, 5, 4, 5]), max_len=8)
        assert got.perplexity == pytest.approx(math.exp(nll / 3), abs=1e-9)
        assert got.loss == pytest.approx(nll / 3, abs=1e-12)

    def test_vocab_permutation(self):
        rng = np.random.default_rng(1)
        table = rng.normal(size=(9, 9))
        perm = np.concatenate([np.arange(4), 4 + rng.permutation(5)])
        stream = list(rng.integers(4, 9, size=50))
        inv_table = np.empty_like(table)
        inv_table[np.ix_(perm, perm)] = table
        a = perplexity(Stub(lambda b: table[b.tgt_in]), lm_data(stream), max_len=10)
        b = perplexity(Stub(lambda b: inv_table[b.tgt_in]), lm_data(perm[stream]), max_len=10)
        assert a.perplexity == pytest.approx(b.perplexity, rel=1e-12)

    def test_empty_split(self):
        with pytest.raises(ValueError):
            perplexity(Stub(lambda b: None), lm_data([]))


class TestTokenAccuracy:
    pairs = [([4, 5], [1, 4, 5, 2]), ([6, 7], [1, 6, 7, 2])]

    def test_gold_echo(self):
        def fn(b):
            out = np.zeros(b.tgt_out.shape + (8,))
            np.put_along_axis(out, b.tgt_out[..., None], 1.0, axis=-1)
            return out
        assert token_accuracy(Stub(fn), pair_data(self.pairs)) == 1.0

    def test_constant_wrong(self):
        def fn(b):
            out = np.zeros(b.tgt_out.shape + (8,))
            out[..., 3] = 1.0
            return out
        assert token_accuracy(Stub(fn), pair_data(self.pairs)) == 0.0

    def test_half_correct(self):
        def fn(b):
            # gold for the first row of the batch, a wrong id everywhere in the second
            out = np.zeros(b.tgt_out.shape + (8,))
            np.put_along_axis(out, b.tgt_out[..., None], 1.0, axis=-1)
            out[1] = 0.0
            out[1, :, 3] = 1.0
            return out
        assert token_accuracy(Stub(fn), pair_data(self.pairs)) == 0.5


def tiny_setup(seed=0, steps=40):
    task = gen_copy(240, 2, 4, 4, seed=1)
    cfg = TransformerConfig(1, AttentionConfig(16, 2), 32, len(task.vocab), task.max_src_len,
                            task.max_tgt_len)
    tc = TrainConfig(lr=3e-3, max_steps=steps, eval_every=20, warmup_steps=5, seed=seed,
                     batch_size=16)
    return task, cfg, tc


class TestTraining:
    def test_deterministic_logs(self):
        task, cfg, tc = tiny_setup()
        _, a = train(init_params(cfg, 0), task, tc)
        _, b = train(init_params(cfg, 0), task, tc)
        assert a.to_csv(with_wall=False) == b.to_csv(with_wall=False)
        assert a.to_csv().splitlines()[0] == "step,split,loss,ppl_or_acc,bleu,lr,wall_ms"

    def test_empty_maskset_no_op(self):
        task, cfg, tc = tiny_setup()
        a, _ = train(init_params(cfg, 0), task, tc)
        b, _ = train(init_params(cfg, 0), task, tc, MaskSet.empty(cfg))
        assert a.digest() == b.digest()

    def test_loss_decreases(self):
        task, cfg, tc = tiny_setup(steps=60)
        _, log = train(init_params(cfg, 0), task, tc)
        train_rows = [r["loss"] for r in log.rows if r["split"] == "train"]
        assert train_rows[-1] < train_rows[0] and log.status == "ok"

    def test_wrong_data_kind(self):
        task, cfg, tc = tiny_setup()
        lm_cfg = TransformerConfig(1, AttentionConfig(16, 2), 32, 8, 6, 6, arch="lm")
        with pytest.raises(ValueError):
            train(init_params(lm_cfg, 0), task, tc)

    def test_collect_stats(self):
        task, cfg, _ = tiny_setup()
        ckpt = init_params(cfg, 0)
        stats = collect_stats(ckpt, task.train)
        assert stats.examples_seen == len(task.train) and stats.source == ckpt.digest()
        for key, counts in stats.counts.items():
            assert counts.max() <= stats.examples_seen
            assert np.all(stats.sums[key] <= counts + 1e-12)
        evaluate(ckpt, task.valid)


class TestPipeline:
    def test_p_zero_reproduces_baseline(self):
        task, cfg, tc = tiny_setup()
        base = train_baseline(cfg, task, tc)
        report, _, masks = prune_and_retrain(base, task, PruneSpec(0), tc)
        assert masks.is_empty()
        for k in ("loss", "token_accuracy", "bleu"):
            assert abs(report.pruned[k] - report.baseline[k]) <= 1e-9

    def test_report_structure(self):
        task, cfg, tc = tiny_setup(steps=30)
        tc.eval_every = 10
        base = train_baseline(cfg, task, tc)
        spec = PruneSpec(50, (AttentionKind.SELF_ENCODER, AttentionKind.CROSS))
        report, _, _ = prune_and_retrain(base, task, spec, tc, retrain_mode="finetune")
        assert sorted((t["kind"], t["layer"]) for t in report.thresholds) == [
            ("cross", 0), ("self_encoder", 0)]
        assert report.retrain_mode == "finetune"
        assert report.stats_checkpoint == report.baseline_checkpoint == base.best.digest()
        assert 0 < report.mac_fraction < 1
        with pytest.raises(ValueError):
            prune_and_retrain(base, task, spec, tc, retrain_mode="bogus")
