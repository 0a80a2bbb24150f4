"""Spearman correlation with a permutation test, and paired bootstrap intervals.

Resampling work is split into fixed-size chunks; chunk ``c`` draws from its
own generator keyed by ``(seed, c)``. Results depend on the seed and the
chunk size, never on how many threads process the chunks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .parallel import ordered_map
from .rng import numpy_generator

CHUNK = 10_000
# |rho_perm| >= |rho_obs| is judged with this slack so that permutations
# reproducing the observed statistic are not lost to rounding
_TIE_EPS = 1e-12


@dataclass
class PairedSeries:
    labels: list[str]
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.shape != self.y.shape or self.x.ndim != 1:
            raise ValueError("x and y must be 1-D and of equal length")
        if self.x.size < 2:
            raise ValueError("need at least 2 pairs")
        if len(self.labels) != self.x.size:
            raise ValueError("one label per pair required")

    def subset(self, keep: Sequence[bool]) -> "PairedSeries":
        keep = np.asarray(keep, dtype=bool)
        return PairedSeries([l for l, k in zip(self.labels, keep) if k], self.x[keep], self.y[keep])


def midranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the average of their positions."""
    v = np.asarray(v, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    ranks = np.empty(v.size)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _centered_ranks(v: np.ndarray, what: str) -> np.ndarray:
    r = midranks(v)
    r -= r.mean()
    if not np.any(r):
        raise ValueError(f"{what} is constant; Spearman correlation is undefined")
    return r


def _as_series(series_or_x, y=None) -> PairedSeries:
    if isinstance(series_or_x, PairedSeries):
        return series_or_x
    x = np.asarray(series_or_x, dtype=np.float64)
    return PairedSeries([str(i) for i in range(x.size)], x, y)


def spearman(series, y=None) -> float:
    """Pearson correlation of midranks (tie-corrected Spearman rho)."""
    s = _as_series(series, y)
    rx = _centered_ranks(s.x, "x")
    ry = _centered_ranks(s.y, "y")
    rho = float(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)))
    return min(1.0, max(-1.0, rho))


@dataclass
class PermutationResult:
    rho: float
    p_two_sided: float
    n_perm: int
    exceed: int
    method: str
    seed: int | None


def permutation_test(series, y=None, n_perm: int = 100_000, seed: int = 42, exact: bool = False,
                     chunk: int = CHUNK) -> PermutationResult:
    """Two-sided permutation test of Spearman rho, permuting y with x fixed.

    Monte Carlo mode returns ``(1 + #{|rho_perm| >= |rho_obs|}) / (1 + n_perm)``.
    ``exact=True`` enumerates all n! permutations (n <= 9) and returns the
    exact proportion, identity included.
    """
    s = _as_series(series, y)
    n = s.x.size
    if n < 3:
        raise ValueError("permutation test needs at least 3 pairs")
    rx = _centered_ranks(s.x, "x")
    ry = _centered_ranks(s.y, "y")
    denom = math.sqrt((rx @ rx) * (ry @ ry))
    rho = spearman(s)
    target = abs(rho) - _TIE_EPS

    if exact:
        if n > 9:
            raise ValueError("exact enumeration is limited to n <= 9")
        perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        stats = np.abs(ry[perms] @ rx / denom)
        count = int(np.count_nonzero(stats >= target))
        total = perms.shape[0]
        return PermutationResult(rho, count / total, total, count, "exact", None)

    n_chunks = -(-n_perm // chunk)

    def run(c):
        size = min(chunk, n_perm - c * chunk)
        g = numpy_generator(seed, "spearman-perm", c)
        perm_ry = g.permuted(np.tile(ry, (size, 1)), axis=1)
        return int(np.count_nonzero(np.abs(perm_ry @ rx / denom) >= target))

    exceed = sum(ordered_map(run, range(n_chunks)))
    return PermutationResult(rho, (1 + exceed) / (1 + n_perm), n_perm, exceed, "monte_carlo", seed)


@dataclass
class BootstrapResult:
    delta: float
    lo: float
    hi: float
    level: float
    n_boot: int
    seed: int


def _correctness(v) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("correctness vector must be a nonempty 1-D sequence")
    if not np.isin(arr, (0, 1, True, False)).all():
        raise ValueError("correctness values must be 0/1 or booleans")
    return arr.astype(np.int64)


def paired_bootstrap_ci(a, b, n_boot: int = 10_000, level: float = 0.95, seed: int = 42,
                        chunk: int = 500) -> BootstrapResult:
    """Percentile CI for ``mean(a) - mean(b)`` resampling example indices jointly."""
    a, b = _correctness(a), _correctness(b)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    n = a.size
    diff = a - b
    delta = float(diff.sum()) / n
    n_chunks = -(-n_boot // chunk)

    def run(c):
        size = min(chunk, n_boot - c * chunk)
        g = numpy_generator(seed, "bootstrap", c)
        idx = g.integers(0, n, size=(size, n))
        return diff[idx].sum(axis=1) / n

    deltas = np.concatenate(ordered_map(run, range(n_chunks)))
    tail = (1.0 - level) / 2.0 * 100.0
    lo, hi = np.percentile(deltas, [tail, 100.0 - tail])
    return BootstrapResult(delta, float(lo), float(hi), level, n_boot, seed)
