"""Multiply-accumulate (MAC) cost of one attention layer, analytic and counted."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Dict, List, Optional

_COUNTERS: List["MacCounter"] = []


@dataclass(frozen=True)
class CostParams:
    batch: int
    seq_len: int
    d_model: int
    n_heads: int
    d_k: int
    p: float = 0.0  # pruned fraction in [0, 1], not percent

    def __post_init__(self):
        if self.n_heads * self.d_k != self.d_model:
            raise ValueError("n_heads * d_k must equal d_model")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p is a fraction in [0, 1]")


def attention_macs(params: CostParams, exact: bool = False) -> Dict[str, object]:
    """Per-step MACs: projections, scores, weights @ values, output projection.

    With ``exact`` the counts come back as :class:`~fractions.Fraction`.
    """
    b, n, d, h, dk = params.batch, params.seq_len, params.d_model, params.n_heads, params.d_k
    steps = {
        "qkv_projection": 3 * b * n * d * d,
        "scores": b * h * n * n * dk,
        "weighted_values": (1 - Fraction(params.p)) * b * h * n * n * dk,
        "output_projection": b * n * d * d,
    }
    steps["total"] = sum(steps.values())
    if exact:
        return steps
    return {k: _num(v) for k, v in steps.items()}


def _num(v):
    v = Fraction(v)
    return int(v) if v.denominator == 1 else float(v)


def mac_fraction(d: int, n: int, p: float) -> float:
    """Fraction of dense attention MACs left after pruning a fraction p of the scores."""
    if d < 1 or n < 1:
        raise ValueError("d and N must be positive")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p is a fraction in [0, 1]")
    return (4 * d + (2 - p) * n) / (4 * d + 2 * n)


def cost_report(d: int, n: int, ps, heads: int = 1, batch: int = 1) -> dict:
    rows = []
    for p in ps:
        params = CostParams(batch, n, d, heads, d // heads, p)
        rows.append({"p": p, "macs": attention_macs(params), "fraction": mac_fraction(d, n, p)})
    return {"params": {"d_model": d, "seq_len": n, "n_heads": heads, "batch": batch,
                       "p_units": "fraction"}, "rows": rows}


class MacCounter:
    def __init__(self):
        self.steps = {"qkv_projection": 0, "scores": 0, "weighted_values": 0,
                      "output_projection": 0}

    def add(self, step: str, macs) -> None:
        self.steps[step] += int(macs)

    @property
    def total(self) -> int:
        return sum(self.steps.values())

    def as_dict(self):
        return dict(self.steps, total=self.total)


def active_counter() -> Optional[MacCounter]:
    return _COUNTERS[-1] if _COUNTERS else None


@contextlib.contextmanager
def counting():
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def count_macs_instrumented(forward: Callable[[], object]) -> Dict[str, int]:
    """Run ``forward`` with counting on; masked score/value products are skipped."""
    with counting() as counter:
        forward()
    return counter.as_dict()
