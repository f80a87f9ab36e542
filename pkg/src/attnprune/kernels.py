"""Hot inner loops.

Each kernel exists twice: a plain loop written for ``numba.njit`` and a
vectorised numpy twin. The public names bind to one or the other depending on
``attnprune._accel.USE_NUMBA``; both twins stay importable so the benchmark and
the tests can compare them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

ENTMAX_ITERS = 60


# --------------------------------------------------------------------------
# 1.5-entmax threshold search
# --------------------------------------------------------------------------


def _entmax15_loop(z, n_iter):
    rows, m = z.shape
    out = np.empty_like(z)
    for r in range(rows):
        amax = -np.inf
        for j in range(m):
            a = 0.5 * z[r, j]
            if a > amax:
                amax = a
        lo = amax - 1.0
        hi = amax
        for _ in range(n_iter):
            mid = 0.5 * (lo + hi)
            f = 0.0
            for j in range(m):
                d = 0.5 * z[r, j] - mid
                if d > 0.0:
                    f += d * d
            if f >= 1.0:
                lo = mid
            else:
                hi = mid
        tau = 0.5 * (lo + hi)
        total = 0.0
        for j in range(m):
            d = 0.5 * z[r, j] - tau
            if d > 0.0:
                out[r, j] = d * d
                total += d * d
            else:
                out[r, j] = 0.0
        for j in range(m):
            out[r, j] /= total
    return out


def _entmax15_numpy(z, n_iter):
    a = 0.5 * z
    hi = a.max(axis=1)
    lo = hi - 1.0
    for _ in range(n_iter):
        mid = 0.5 * (lo + hi)
        f = np.square(np.maximum(a - mid[:, None], 0.0)).sum(axis=1)
        ge = f >= 1.0
        lo = np.where(ge, mid, lo)
        hi = np.where(ge, hi, mid)
    tau = 0.5 * (lo + hi)
    p = np.square(np.maximum(a - tau[:, None], 0.0))
    return p / p.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# attention statistics: windowed sum / visit-count update
# --------------------------------------------------------------------------


def _accumulate_loop(sums, counts, weights, query_valid, key_valid, causal):
    n, m = weights.shape
    for i in range(n):
        if not query_valid[i]:
            continue
        for j in range(m):
            if not key_valid[j]:
                continue
            if causal and j > i:
                continue
            sums[i, j] += weights[i, j]
            counts[i, j] += 1


def _accumulate_numpy(sums, counts, weights, query_valid, key_valid, causal):
    n, m = weights.shape
    visit = np.logical_and.outer(query_valid, key_valid)
    if causal:
        visit &= np.tri(n, m, dtype=bool)
    sums[:n, :m] += np.where(visit, weights, 0.0)
    counts[:n, :m] += visit


# --------------------------------------------------------------------------
# sparse-aware weights @ values with MAC counting
# --------------------------------------------------------------------------


def _sparse_apply_loop(weights, values, masked):
    rows, n, m = weights.shape
    dv = values.shape[2]
    out = np.zeros((rows, n, dv))
    macs = np.int64(0)
    for r in range(rows):
        for i in range(n):
            for j in range(m):
                if masked[r, i, j]:
                    continue
                w = weights[r, i, j]
                for k in range(dv):
                    out[r, i, k] += w * values[r, j, k]
                macs += dv
    return out, macs


def _sparse_apply_numpy(weights, values, masked):
    kept = np.where(masked, 0.0, weights)
    out = np.matmul(kept, values)
    macs = np.int64((~masked).sum()) * np.int64(values.shape[2])
    return out, macs


if USE_NUMBA:
    entmax15_bisect = njit(_entmax15_loop)
    accumulate_window = njit(_accumulate_loop)
    sparse_apply = njit(_sparse_apply_loop)
else:
    entmax15_bisect = _entmax15_numpy
    accumulate_window = _accumulate_numpy
    sparse_apply = _sparse_apply_numpy


def entmax15_rows_array(z, n_iter=ENTMAX_ITERS):
    """1.5-entmax along the last axis of an arbitrary-rank float64 array."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    flat = z.reshape(-1, z.shape[-1])
    if flat.shape[0] == 0:
        return np.zeros_like(z)
    return entmax15_bisect(flat, n_iter).reshape(z.shape)
