import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnprune.attention import AttentionConfig, multi_head
from attnprune.cost import (CostParams, attention_macs, cost_report, count_macs_instrumented,
                            mac_fraction)
from attnprune.tensor import Tensor


def _random_params(rng, d):
    w = {n: Tensor(rng.normal(scale=0.3, size=(d, d))) for n in ("wq", "wk", "wv", "wo")}
    w.update({n: Tensor(rng.normal(scale=0.1, size=d)) for n in ("bq", "bk", "bv", "bo")})
    return w


class TestAnalytic:
    def test_hand_count(self):
        m = attention_macs(CostParams(1, 2, 4, 1, 4, 0.0))
        steps = [m[k] for k in ("qkv_projection", "scores", "weighted_values", "output_projection")]
        assert steps == [96, 16, 16, 32]
        assert m["total"] == 160

    def test_full_pruning(self):
        m0 = attention_macs(CostParams(2, 5, 8, 2, 4, 0.0))
        m1 = attention_macs(CostParams(2, 5, 8, 2, 4, 1.0))
        assert m1["weighted_values"] == 0
        for k in ("qkv_projection", "scores", "output_projection"):
            assert m1[k] == m0[k]

    def test_linear_in_batch(self):
        one = attention_macs(CostParams(1, 6, 8, 2, 4, 0.25))
        two = attention_macs(CostParams(2, 6, 8, 2, 4, 0.25))
        assert all(two[k] == 2 * one[k] for k in one)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            CostParams(1, 2, 4, 3, 1, 0.0)
        with pytest.raises(ValueError):
            CostParams(1, 2, 4, 1, 4, 50)


class TestFraction:
    def test_worked_value(self):
        assert mac_fraction(32, 64, 0.5) == 0.875

    @pytest.mark.parametrize("d,n", [(1, 1), (8, 3), (512, 4096)])
    def test_no_pruning(self, d, n):
        assert mac_fraction(d, n, 0.0) == 1.0

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_long_sequence_limit(self, p):
        d = 16
        assert abs(mac_fraction(d, 10**6 * d, p) - (2 - p) / 2) < 1e-3

    @given(st.integers(1, 64), st.integers(1, 128), st.integers(1, 16),
           st.fractions(0, 1, max_denominator=20))
    def test_ratio_of_counts(self, d_k, n, h, p):
        d = d_k * h
        num = attention_macs(CostParams(1, n, d, h, d_k, p), exact=True)["total"]
        den = attention_macs(CostParams(1, n, d, h, d_k, 0), exact=True)["total"]
        assert num / den == Fraction(4 * d + (2 - p) * n, 4 * d + 2 * n)
        assert abs(mac_fraction(d, n, float(p)) - float(num / den)) < 1e-15

    def test_monotone(self):
        ps = np.linspace(0, 1, 21)
        fr = [mac_fraction(32, 64, p) for p in ps]
        assert all(a > b for a, b in zip(fr, fr[1:]))
        ns = [mac_fraction(32, n, 0.5) for n in (1, 4, 16, 64, 256)]
        assert all(a > b for a, b in zip(ns, ns[1:]))

    def test_report_labels_units(self):
        rep = cost_report(32, 64, [0.0, 0.5])
        assert rep["params"]["p_units"] == "fraction"
        assert rep["rows"][1]["fraction"] == 0.875


class TestInstrumented:
    @pytest.mark.parametrize("b,n,d,h", list(itertools.product((1, 2), (2, 4, 8), (4, 8), (1, 2))))
    def test_grid_matches_formula(self, b, n, d, h):
        rng = np.random.default_rng(b * 100 + n * 10 + d + h)
        x = Tensor(rng.normal(size=(b, n, d)))
        params = _random_params(rng, d)
        counted = count_macs_instrumented(
            lambda: multi_head(x, x, params, AttentionConfig(d, h)))
        assert counted == attention_macs(CostParams(b, n, d, h, d // h, 0.0))

    def test_half_mask(self):
        rng = np.random.default_rng(0)
        n, d, h = 4, 8, 2
        x = Tensor(rng.normal(size=(n, d)))
        params = _random_params(rng, d)
        mask = np.zeros((h, n, n))
        mask[:, :, 2:] = -1e9
        counted = count_macs_instrumented(
            lambda: multi_head(x, x, params, AttentionConfig(d, h), head_masks=mask))
        dense = attention_macs(CostParams(1, n, d, h, d // h, 0.0))
        assert counted["weighted_values"] * 2 == dense["weighted_values"]
        assert counted == attention_macs(CostParams(1, n, d, h, d // h, 0.5))

    def test_counting_is_pure(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(2, 5, 8)))
        params = _random_params(rng, 8)
        mask = np.where(rng.random((2, 5, 5)) < 0.4, -1e9, 0.0)
        mask[:, :, 0] = 0.0
        cfg = AttentionConfig(8, 2)
        plain = multi_head(x, x, params, cfg, head_masks=mask).data
        box = []
        count_macs_instrumented(lambda: box.append(multi_head(x, x, params, cfg,
                                                               head_masks=mask).data))
        assert np.max(np.abs(plain - box[0])) <= 1e-15
