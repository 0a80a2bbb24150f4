"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature.
The two must agree bit for bit; ``tests/test_kernels.py`` enforces this.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TO_UNIT = 2.0**-53

# bounds the uint64 temporaries for very large tensors
_BLOCK = 1 << 20


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _uniform(key: int, start: int, n: int) -> np.ndarray:
    idx = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    bits = _mix(np.uint64(key) + idx * _GAMMA)
    return (bits >> np.uint64(11)).astype(np.float64) * _TO_UNIT


def uniform_block(key: int, start: int, n: int) -> np.ndarray:
    """Uniforms in [0, 1) for counters ``start .. start+n-1`` under ``key``."""
    out = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        out[lo:hi] = _uniform(key, start + lo, hi - lo)
    return out


def dare_sparsify(x: np.ndarray, key: int, p: float) -> tuple[np.ndarray, int]:
    x = np.ascontiguousarray(x, dtype=np.float32).ravel()
    scale = 1.0 / (1.0 - p)
    out = np.zeros(x.size, dtype=np.float64)
    kept = 0
    for lo in range(0, x.size, _BLOCK):
        hi = min(lo + _BLOCK, x.size)
        keep = _uniform(key, lo, hi - lo) >= p
        seg = x[lo:hi].astype(np.float64) * scale
        out[lo:hi] = np.where(keep, seg, 0.0)
        kept += int(np.count_nonzero(keep))
    return out, kept


def della_sparsify(
    x: np.ndarray, key: int, p_target: float, max_abs: float
) -> tuple[np.ndarray, int]:
    x = np.ascontiguousarray(x, dtype=np.float32).ravel()
    out = np.zeros(x.size, dtype=np.float64)
    kept = 0
    for lo in range(0, x.size, _BLOCK):
        hi = min(lo + _BLOCK, x.size)
        seg = x[lo:hi].astype(np.float64)
        if max_abs > 0.0:
            p = (1.0 - np.abs(seg) / max_abs) * p_target
        else:
            p = np.zeros_like(seg)
        keep = _uniform(key, lo, hi - lo) >= p
        out[lo:hi] = np.where(keep, seg * (1.0 / (1.0 - p)), 0.0)
        kept += int(np.count_nonzero(keep))
    return out, kept


def ties_elect_merge(stack: np.ndarray):
    """Sign election and disjoint mean over the rows of ``stack`` (N x n, float64).

    Returns ``(merged, contrib, conflicts, n_pos, n_neg, n_zero)`` where
    ``contrib[i]`` counts the coordinates at which row i agreed with the
    elected sign and entered the mean.
    """
    stack = np.ascontiguousarray(stack, dtype=np.float64)
    n_vec, n = stack.shape
    pos = np.zeros(n, dtype=np.int64)
    neg = np.zeros(n, dtype=np.int64)
    total = np.zeros(n, dtype=np.float64)
    for i in range(n_vec):
        row = stack[i]
        pos += row > 0
        neg += row < 0
        total += row
    elected = np.where(pos > neg, 1, np.where(neg > pos, -1, 0)).astype(np.int8)
    tied = pos == neg
    elected[tied & (total > 0)] = 1
    elected[tied & (total < 0)] = -1

    acc = np.zeros(n, dtype=np.float64)
    count = np.zeros(n, dtype=np.int64)
    contrib = np.zeros(n_vec, dtype=np.int64)
    for i in range(n_vec):
        row = stack[i]
        agree = ((row > 0) & (elected == 1)) | ((row < 0) & (elected == -1))
        acc += np.where(agree, row, 0.0)
        count += agree
        contrib[i] = int(np.count_nonzero(agree))
    merged = np.where(count > 0, acc / np.maximum(count, 1), 0.0)
    conflicts = int(np.count_nonzero((pos > 0) & (neg > 0)))
    n_pos = int(np.count_nonzero(elected == 1))
    n_neg = int(np.count_nonzero(elected == -1))
    return merged, contrib, conflicts, n_pos, n_neg, n - n_pos - n_neg


def sign_agree_count(a: np.ndarray, b: np.ndarray) -> int:
    a = np.ascontiguousarray(a, dtype=np.float32).ravel()
    b = np.ascontiguousarray(b, dtype=np.float32).ravel()
    total = 0
    for lo in range(0, a.size, _BLOCK):
        hi = min(lo + _BLOCK, a.size)
        total += int(np.count_nonzero(np.sign(a[lo:hi]) == np.sign(b[lo:hi])))
    return total
