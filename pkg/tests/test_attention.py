import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnprune import kernels
from attnprune.attention import (AdditiveMask, AttentionConfig, build_causal_mask,
                                 combine_masks, entmax15_backward, entmax15_rows, multi_head,
                                 scaled_dot_product, softmax_rows)
from attnprune.errors import MaskError, ShapeError
from attnprune.tensor import Tensor, finite_diff_check

from oracles import attention_loop, entmax15_bisect_scalar, entmax15_sorted

NEG = -1e9


def sm(rows):
    return softmax_rows(Tensor(rows)).data


def em(rows):
    return entmax15_rows(Tensor(rows)).data


class TestSoftmax:
    def test_symmetric(self):
        assert sm([[0.0, 0.0]]).tolist() == [[0.5, 0.5]]

    @pytest.mark.parametrize("c", [-30.0, 0.0, 7.5, 400.0])
    def test_shift_invariance(self, c):
        assert np.allclose(sm([[c] * 4]), 0.25, atol=1e-15)

    def test_log_weights(self):
        assert np.allclose(sm([[0.0, math.log(3)]]), [[0.25, 0.75]], atol=1e-15)


class TestEntmax:
    def test_symmetric(self):
        assert np.allclose(em([[1.3, 1.3]]), 0.5, atol=1e-15)

    def test_boundary_case(self):
        p = em([[2.0, 0.0]])
        assert p[0, 1] == 0.0
        assert abs(p[0, 0] - 1.0) < 1e-15
        assert np.allclose(entmax15_bisect_scalar([2.0, 0.0]), [1.0, 0.0], atol=1e-12)

    def test_two_support_closed_form(self):
        tau = (1 - math.sqrt(7)) / 4
        expected = [(0.5 - tau) ** 2, tau ** 2]
        assert np.allclose(em([[1.0, 0.0]])[0], expected, atol=1e-12)
        assert np.allclose(entmax15_bisect_scalar([1.0, 0.0]), expected, atol=1e-12)

    def test_matches_independent_solvers(self):
        z = np.random.default_rng(0).normal(scale=3.0, size=(200, 9))
        p = em(z)
        ref = np.array([entmax15_sorted(row) for row in z])
        assert np.max(np.abs(p - ref)) < 1e-8

    def test_large_logits_converge(self):
        z = np.random.default_rng(1).uniform(-50, 50, size=(50, 12))
        p = em(z)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_numba_and_numpy_twins_agree(self):
        z = np.random.default_rng(2).normal(size=(64, 10))
        a = kernels._entmax15_numpy(z, kernels.ENTMAX_ITERS)
        b = kernels.entmax15_bisect(z, kernels.ENTMAX_ITERS)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_sparsity_on_gaussian_rows(self):
        z = np.random.default_rng(3).standard_normal(size=(1000, 16))
        zero_rows = (em(z) == 0.0).any(axis=1).mean()
        assert zero_rows >= 0.9


class TestEntmaxBackward:
    def test_constant_upstream_vanishes(self):
        p = np.full((1, 5), 0.2)
        assert np.allclose(entmax15_backward(p, np.full((1, 5), 3.0)), 0.0, atol=1e-15)

    def test_off_support_zero(self):
        p = em([[3.0, 0.0, -4.0, 2.5]])
        g = entmax15_backward(p, np.array([[0.3, -1.0, 2.0, 0.7]]))
        assert np.all(g[p == 0] == 0.0)

    def test_finite_differences(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, size=(1, 8))
        pick = rng.normal(size=(1, 8))
        # keep every logit away from the support boundary
        a = x / 2
        p = entmax15_sorted(x[0])
        on = p > 0
        tau = np.min(a[0][on] - np.sqrt(p[on]))
        assert np.all(np.abs(a[0] - tau) > 1e-3)
        assert finite_diff_check(lambda t: (entmax15_rows(t) * Tensor(pick)).sum(), x) < 1e-4


class TestScaledDotProduct:
    def test_single_key(self):
        rng = np.random.default_rng(5)
        _, w = scaled_dot_product(*(Tensor(rng.normal(size=(1, 3))) for _ in range(3)))
        assert w.data.tolist() == [[1.0]]

    def test_dominated_entry(self):
        q = Tensor([[1.0, 0.0]])
        k = Tensor([[5.0 * math.sqrt(2), 0.0], [5.0 * math.sqrt(2), 0.0]])
        v = Tensor(np.eye(2))
        _, w = scaled_dot_product(q, k, v, AdditiveMask([[0.0, NEG]]))
        assert w.data[0, 1] < 1e-8 and abs(w.data[0, 0] - 1) < 1e-12

    def test_hand_case(self):
        # logits [[0, ln3], [0, 0]] with d_k = 1
        q = Tensor([[1.0], [0.0]])
        k = Tensor([[0.0], [math.log(3)]])
        v = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out, w = scaled_dot_product(q, k, v)
        assert np.allclose(w.data, [[0.25, 0.75], [0.5, 0.5]], atol=1e-15)
        assert np.allclose(out.data, [[2.5, 3.5], [2.0, 3.0]], atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            scaled_dot_product(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))),
                               Tensor(np.ones((2, 4))))

    def test_fully_masked_row(self):
        ones = Tensor(np.ones((2, 2)))
        with pytest.raises(MaskError):
            scaled_dot_product(ones, ones, ones, np.array([[0.0, NEG], [NEG, NEG]]))

    @pytest.mark.parametrize("activation", ["softmax", "entmax15"])
    def test_mask_soundness(self, activation):
        rng = np.random.default_rng(6)
        q, k, v = (Tensor(rng.normal(size=(5, 4))) for _ in range(3))
        mask = np.where(rng.random((5, 5)) < 0.5, NEG, 0.0)
        mask[np.arange(5), rng.integers(0, 5, 5)] = 0.0
        _, w = scaled_dot_product(q, k, v, mask, activation)
        limit = 1e-8 if activation == "softmax" else 1e-12
        assert np.all(w.data[mask < 0] < limit)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        q, k, v = rng.normal(size=(4, 3)), rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
        mask = np.where(rng.random((4, 6)) < 0.4, NEG, 0.0)
        mask[:, 0] = 0.0
        perm = rng.permutation(6)
        out1, w1 = scaled_dot_product(Tensor(q), Tensor(k), Tensor(v), mask)
        out2, w2 = scaled_dot_product(Tensor(q), Tensor(k[perm]), Tensor(v[perm]), mask[:, perm])
        assert np.max(np.abs(out1.data - out2.data)) < 1e-12
        assert np.max(np.abs(w1.data[:, perm] - w2.data)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)),
              elements=st.floats(-50, 50)))
def test_rows_are_distributions(z):
    for p in (sm(z), em(z)):
        assert np.all(p >= 0)
        assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def _params(rng, d):
    w = {}
    for name in ("wq", "wk", "wv", "wo"):
        w[name] = rng.normal(scale=0.5, size=(d, d))
    for name in ("bq", "bk", "bv", "bo"):
        w[name] = rng.normal(scale=0.1, size=d)
    return w


class TestMultiHead:
    def test_single_head_identity_projections(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(5, 4))
        params = {"wq": Tensor(np.eye(4)), "wk": Tensor(np.eye(4)), "wv": Tensor(np.eye(4)),
                  "wo": Tensor(np.eye(4))}
        out = multi_head(Tensor(x), Tensor(y), params, AttentionConfig(4, 1))
        ref, _ = scaled_dot_product(Tensor(x), Tensor(y), Tensor(y))
        assert np.allclose(out.data, ref.data, atol=1e-15)

    def test_causal_structure(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(3, 4)))
        seen = []
        params = {k: Tensor(v) for k, v in _params(rng, 4).items()}
        multi_head(x, x, params, AttentionConfig(4, 2), causal=True, observer=seen.append)
        w = seen[0]
        assert w.shape == (2, 3, 3)
        for i, j in [(0, 1), (0, 2), (1, 2)]:
            assert np.all(w[:, i, j] < 1e-8)

    @pytest.mark.parametrize("activation", ["softmax", "entmax15"])
    def test_matches_loop_reference(self, activation):
        rng = np.random.default_rng(10)
        x, y = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        w = _params(rng, 4)
        masks = [np.where(rng.random((3, 5)) < 0.3, NEG, 0.0) for _ in range(2)]
        for m in masks:
            m[:, 2] = 0.0
        cfg = AttentionConfig(4, 2, activation=activation)
        out = multi_head(Tensor(x), Tensor(y), {k: Tensor(v) for k, v in w.items()}, cfg,
                         head_masks=masks)
        ref = attention_loop(x, y, w, 2, masks, activation=activation)
        tol = 1e-12 if activation == "softmax" else 1e-8
        assert np.max(np.abs(out.data - ref)) < tol

    def test_causal_matches_loop_reference(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(4, 4))
        w = _params(rng, 4)
        out = multi_head(Tensor(x), Tensor(x), {k: Tensor(v) for k, v in w.items()},
                         AttentionConfig(4, 2), causal=True)
        assert np.max(np.abs(out.data - attention_loop(x, x, w, 2, causal=True))) < 1e-12

    def test_head_count_mismatch(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.normal(size=(2, 4)))
        params = {k: Tensor(v) for k, v in _params(rng, 4).items()}
        with pytest.raises(MaskError):
            multi_head(x, x, params, AttentionConfig(4, 2), head_masks=[None])

    def test_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(-2, 2, size=(3, 4))
        w = _params(rng, 4)
        probe = rng.normal(size=(3, 4))
        cfg = AttentionConfig(4, 2)

        def f(t):
            params = {k: Tensor(v) for k, v in w.items()}
            return (multi_head(t, t, params, cfg, causal=True) * Tensor(probe)).sum()

        assert finite_diff_check(f, x) < 1e-4

        def f_wq(t):
            params = {k: Tensor(v) for k, v in w.items()}
            params["wq"] = t
            return (multi_head(Tensor(x), Tensor(x), params, cfg) * Tensor(probe)).sum()

        assert finite_diff_check(f_wq, w["wq"]) < 1e-4


class TestMasks:
    def test_causal_single(self):
        assert build_causal_mask(1).matrix.tolist() == [[0.0]]

    def test_causal_three(self):
        m = build_causal_mask(3).matrix
        assert (m < 0).sum() == 3
        assert np.array_equal(m < 0, np.triu(np.ones((3, 3), dtype=bool), 1))

    def test_combining_with_pruned_row_fails(self):
        prune = AdditiveMask([[0.0, NEG, NEG], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        with pytest.raises(MaskError):
            # row 0 keeps only (0, 0); pruning it as well empties the row
            build_causal_mask(3).combine(
                AdditiveMask([[NEG, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
        assert np.array_equal(build_causal_mask(3).combine(prune).matrix < 0,
                              np.triu(np.ones((3, 3), dtype=bool), 1))

    def test_entrywise_minimum(self):
        cfg = AttentionConfig(4, 2)
        prune = np.zeros((2, 3, 3))
        prune[0, 2, 0] = NEG
        combined = combine_masks(3, 3, cfg, prune, causal=True)
        assert combined.shape == (2, 3, 3)
        assert combined[0, 2, 0] == NEG and combined[1, 2, 0] == 0.0
        assert np.all(combined[:, 0, 1:] == NEG)

    def test_invalid_entries(self):
        with pytest.raises(MaskError):
            AdditiveMask([[0.0, -5.0]])
