"""Linear interpolation paths between checkpoints and the loss-barrier metric."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .tensor_store import Checkpoint, align_keys

DEFAULT_ALPHAS = [i / 10 for i in range(11)]


@dataclass
class InterpolationPath:
    endpoint_a_id: str
    endpoint_b_id: str
    alphas: list[float]
    losses: list[float] | None = None
    checkpoints: list[Checkpoint] | None = field(default=None, repr=False)

    def __post_init__(self):
        validate_alphas(self.alphas)
        if self.losses is not None and len(self.losses) != len(self.alphas):
            raise ValueError(f"{len(self.losses)} losses for {len(self.alphas)} alphas")


def validate_alphas(alphas: Sequence[float]) -> None:
    if len(alphas) < 2:
        raise ValueError("need at least the two endpoints")
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    if any(b <= a for a, b in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be strictly ascending")
    if alphas[0] != 0.0 or alphas[-1] != 1.0:
        raise ValueError("alphas must include 0 and 1")


def _weights(alpha: float) -> tuple[float, float]:
    """Weights (on a, on b) for mixing coefficient ``alpha``.

    Alphas within 1e-12 of a rational with denominator <= 10^6 are snapped
    to it and ``1 - alpha`` is taken in exact arithmetic. That makes
    ``interpolate(a, b, t)`` and ``interpolate(b, a, 1 - t)`` bitwise equal
    even where ``1 - t`` rounds in binary (t = 0.1, 0.7, ...).
    """
    q = Fraction(alpha).limit_denominator(10**6)
    if abs(float(q) - alpha) > 1e-12:
        q = Fraction(alpha)
    return float(q), float(1 - q)


def interpolate_one(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray], alpha: float) -> dict:
    """``alpha * a + (1 - alpha) * b`` elementwise, float64 math, float32 result."""
    wa, wb = _weights(alpha)
    if wb == 0.0 or wa == 0.0:
        # endpoints are copies, so signed zeros survive
        src = a if wb == 0.0 else b
        return {name: np.array(src[name], dtype=np.float32) for name in sorted(a)}
    out = {}
    for name in sorted(a):
        x = np.asarray(a[name], dtype=np.float64)
        y = np.asarray(b[name], dtype=np.float64)
        out[name] = (wa * x + wb * y).astype(np.float32)
    return out


def iter_interpolate(a: Checkpoint, b: Checkpoint, alphas: Sequence[float]) -> Iterator[tuple[float, Checkpoint]]:
    """Yield one interpolated checkpoint at a time (memory: two inputs + one output)."""
    validate_alphas(list(alphas))
    rep = align_keys([a.tensors, b.tensors])
    if rep.missing[0] or rep.missing[1]:
        raise ValueError(f"manifest mismatch: {rep.missing}")
    for alpha in alphas:
        meta = {"model_id": f"{a.model_id or 'A'}~{b.model_id or 'B'}@{alpha:g}", "alpha": repr(float(alpha))}
        yield alpha, Checkpoint(tensors=interpolate_one(a.tensors, b.tensors, alpha), metadata=meta)


def interpolate(a: Checkpoint, b: Checkpoint, alphas: Sequence[float] = DEFAULT_ALPHAS) -> InterpolationPath:
    ckpts = [c for _, c in iter_interpolate(a, b, alphas)]
    return InterpolationPath(a.model_id or "A", b.model_id or "B", list(alphas), checkpoints=ckpts)


def barrier(losses: Sequence[float]) -> float:
    """``max(0, max interior loss - max(L_first, L_last))``."""
    losses = [float(x) for x in losses]
    if len(losses) < 3:
        raise ValueError("barrier needs at least 3 loss values (two endpoints and an interior point)")
    if not all(math.isfinite(x) for x in losses):
        raise ValueError("losses must be finite")
    return max(0.0, max(losses[1:-1]) - max(losses[0], losses[-1]))


def barrier_matrix(paths: Sequence[InterpolationPath]) -> dict[tuple[str, str], float]:
    out = {}
    for p in paths:
        if p.losses is None:
            raise ValueError(f"path {p.endpoint_a_id}-{p.endpoint_b_id} has no losses")
        out[(p.endpoint_a_id, p.endpoint_b_id)] = barrier(p.losses)
    return out


def quadratic_loss(theta: Mapping[str, np.ndarray], target: Mapping[str, np.ndarray]) -> float:
    """Toy evaluator ``||theta - target||^2`` for self-tests of the barrier pipeline."""
    total = 0.0
    for name in sorted(target):
        d = np.asarray(theta[name], dtype=np.float64) - np.asarray(target[name], dtype=np.float64)
        total += float(np.add.reduce(d.ravel() * d.ravel()))
    return total


def read_losses_csv(path: str | Path, loss_column: str = "loss") -> tuple[list[float], list[float]]:
    """Read ``alpha,loss`` rows, sorted by alpha."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    if "alpha" not in rows[0] or loss_column not in rows[0]:
        raise ValueError(f"{path}: expected columns 'alpha' and {loss_column!r}, got {list(rows[0])}")
    pairs = sorted((float(r["alpha"]), float(r[loss_column])) for r in rows)
    return [a for a, _ in pairs], [l for _, l in pairs]
