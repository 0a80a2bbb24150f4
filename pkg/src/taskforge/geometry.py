"""Weight-space diagnostics for task vectors and checkpoints."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .parallel import ordered_map
from .taskvec import TaskVector

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 1e-3
DEFAULT_LAYER_PATTERN = r"(?:^|\.)layers\.(\d+)\."


def _tensors(x) -> Mapping[str, np.ndarray]:
    return x.delta if isinstance(x, TaskVector) else x


def _check_manifest(a: Mapping, b: Mapping) -> list[str]:
    names = sorted(a)
    if names != sorted(b):
        raise ValueError("manifest mismatch between tensor maps")
    for n in names:
        if np.shape(a[n]) != np.shape(b[n]):
            raise ValueError(f"shape mismatch on {n!r}")
    return names


def inner(a, b) -> float:
    """Float64 inner product over the flattened maps, summed tensor by tensor in name order."""
    a, b = _tensors(a), _tensors(b)
    names = _check_manifest(a, b)

    def one(n):
        x = np.asarray(a[n], dtype=np.float64).ravel()
        y = np.asarray(b[n], dtype=np.float64).ravel()
        return float(np.add.reduce(x * y))

    total = 0.0
    for v in ordered_map(one, names):
        total += v
    return total


def l2_norm(a) -> float:
    return math.sqrt(inner(a, a))


def cosine_similarity(a, b) -> float:
    na, nb = inner(a, a), inner(b, b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    c = inner(a, b) / math.sqrt(na * nb)
    return min(1.0, max(-1.0, c))


def n_elements(a) -> int:
    return sum(int(np.size(v)) for v in _tensors(a).values())


def sign_agreement(a, b) -> float:
    """Fraction of coordinates with equal sign, where sign(0) = 0."""
    a, b = _tensors(a), _tensors(b)
    names = _check_manifest(a, b)
    d = n_elements(a)
    if d == 0:
        return 1.0
    counts = ordered_map(lambda n: kernels.sign_agree_count(a[n], b[n]), names)
    return sum(counts) / d


def summary_stats(tv, threshold: float = DEFAULT_THRESHOLD) -> dict:
    t = _tensors(tv)
    d = n_elements(t)
    sq = abs_sum = 0.0
    small = 0
    for n in sorted(t):
        x = np.asarray(t[n], dtype=np.float64).ravel()
        ax = np.abs(x)
        sq += float(np.add.reduce(x * x))
        abs_sum += float(np.add.reduce(ax))
        small += int(np.count_nonzero(ax < threshold))
    return {
        "l2": math.sqrt(sq),
        "mean_abs": abs_sum / d if d else 0.0,
        "sparsity": small / d if d else 1.0,
    }


def gram_matrix(tvs: Sequence) -> np.ndarray:
    n = len(tvs)
    g = np.zeros((n, n))
    for i in range(n):
        for j in range(i, n):
            g[i, j] = g[j, i] = inner(tvs[i], tvs[j])
    return g


def displacement_check(tvs: Sequence, i: int) -> dict:
    """Squared displacement of specialist ``i`` from the uniform average.

    ``actual`` is ``||mean(tau) - tau_i||^2`` computed elementwise.
    ``predicted`` is the orthogonal-case closed form
    ``(N-1)^2/N^2 ||tau_i||^2 + 1/N^2 sum_{j!=i} ||tau_j||^2``.
    ``bound`` is the exact algebraic limit on ``|actual - predicted|`` from
    the cross terms: ``2(N-1)/N^2 sum_{j!=i} |<tau_i,tau_j>| +
    1/N^2 sum_{j!=l, j,l!=i} |<tau_j,tau_l>|``.
    """
    n = len(tvs)
    if not 0 <= i < n:
        raise IndexError(f"vector index {i} out of range for {n} vectors")
    maps = [_tensors(t) for t in tvs]
    names = sorted(maps[0])
    for m in maps[1:]:
        _check_manifest(maps[0], m)

    actual = 0.0
    for name in names:
        acc = np.zeros(np.shape(maps[0][name]), dtype=np.float64)
        for m in maps:
            acc += np.asarray(m[name], dtype=np.float64)
        diff = (acc / n - np.asarray(maps[i][name], dtype=np.float64)).ravel()
        actual += float(np.add.reduce(diff * diff))

    g = gram_matrix(maps)
    others = [j for j in range(n) if j != i]
    predicted = (n - 1) ** 2 / n**2 * g[i, i] + sum(g[j, j] for j in others) / n**2
    cross_i = sum(abs(g[i, j]) for j in others)
    cross_rest = sum(abs(g[j, l]) for j in others for l in others if j != l)
    bound = 2 * (n - 1) / n**2 * cross_i + cross_rest / n**2
    return {"index": i, "actual": actual, "predicted": predicted, "bound": bound}


# -- reports ---------------------------------------------------------------


@dataclass
class GeometryReport:
    vector_ids: list[str]
    cosine: list[list[float]]
    sign_agreement: list[list[float]]
    l2_norms: list[float]
    mean_abs: list[float]
    sparsity: list[float]
    threshold: float = DEFAULT_THRESHOLD

    def to_dict(self) -> dict:
        return asdict(self)


def geometry_report(tvs: Sequence[TaskVector], threshold: float = DEFAULT_THRESHOLD) -> GeometryReport:
    n = len(tvs)
    cos = np.eye(n)
    sig = np.eye(n)
    stats = [summary_stats(t, threshold) for t in tvs]
    for i in range(n):
        if stats[i]["l2"] == 0.0:
            cos[i, i] = 0.0
        for j in range(i + 1, n):
            if stats[i]["l2"] > 0 and stats[j]["l2"] > 0:
                cos[i, j] = cos[j, i] = cosine_similarity(tvs[i], tvs[j])
            else:
                cos[i, j] = cos[j, i] = 0.0
            sig[i, j] = sig[j, i] = sign_agreement(tvs[i], tvs[j])
    return GeometryReport(
        vector_ids=[t.specialist_id for t in tvs],
        cosine=cos.tolist(),
        sign_agreement=sig.tolist(),
        l2_norms=[s["l2"] for s in stats],
        mean_abs=[s["mean_abs"] for s in stats],
        sparsity=[s["sparsity"] for s in stats],
        threshold=threshold,
    )


@dataclass
class LayerReport:
    layer_labels: list[str]
    per_layer_norms: list[list[float]]
    per_layer_mean_cosine: list[float]
    vector_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _layer_sort_key(label: str):
    if label == "other":
        return (2, 0, label)
    if label.isdigit():
        return (0, int(label), label)
    return (1, 0, label)


def layer_groups(names: Sequence[str], layer_pattern: str = DEFAULT_LAYER_PATTERN) -> dict[str, list[str]]:
    """Group tensor names by the first capture group of ``layer_pattern``; unmatched -> ``"other"``."""
    rx = re.compile(layer_pattern)
    groups: dict[str, list[str]] = {}
    for name in sorted(names):
        m = rx.search(name)
        label = (m.group(1) if m.groups() else m.group(0)) if m else "other"
        groups.setdefault(label, []).append(name)
    if set(groups) == {"other"} and names:
        log.warning("layer pattern %r matched no tensor names; all tensors grouped as 'other'", layer_pattern)
    return {k: groups[k] for k in sorted(groups, key=_layer_sort_key)}


def per_layer_report(tvs: Sequence[TaskVector], layer_pattern: str = DEFAULT_LAYER_PATTERN) -> LayerReport:
    """Per-layer L2 norms and mean pairwise cosine.

    A pair where either vector is zero on the layer contributes cosine 0.
    """
    maps = [_tensors(t) for t in tvs]
    groups = layer_groups(sorted(maps[0]), layer_pattern)
    labels = list(groups)
    norms = np.zeros((len(maps), len(labels)))
    mean_cos = []
    for li, label in enumerate(labels):
        subs = [{n: m[n] for n in groups[label]} for m in maps]
        for vi, s in enumerate(subs):
            norms[vi, li] = l2_norm(s)
        cs = []
        for i in range(len(subs)):
            for j in range(i + 1, len(subs)):
                if norms[i, li] > 0 and norms[j, li] > 0:
                    cs.append(cosine_similarity(subs[i], subs[j]))
                else:
                    cs.append(0.0)
        mean_cos.append(float(np.mean(cs)) if cs else 0.0)
    return LayerReport(
        layer_labels=labels,
        per_layer_norms=norms.tolist(),
        per_layer_mean_cosine=mean_cos,
        vector_ids=[getattr(t, "specialist_id", str(k)) for k, t in enumerate(tvs)],
    )


@dataclass
class PcaReport:
    point_ids: list[str]
    coordinates: list[list[float]]
    explained_variance_ratio: list[float]
    rank: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def checkpoint_pca(points: Sequence[Mapping[str, np.ndarray]], n_components: int,
                   point_ids: Sequence[str] | None = None) -> PcaReport:
    """PCA of K checkpoints through the K x K Gram matrix of centered points.

    The cost is K^2 inner products of length d, so it scales to ~1e8-dim
    weights where a d x d covariance is out of the question.
    """
    k = len(points)
    if k < 2:
        raise ValueError("PCA needs at least two points")
    if not 1 <= n_components < k:
        raise ValueError(f"n_components must be in [1, {k - 1}] for {k} points")
    maps = [_tensors(p) for p in points]
    names = sorted(maps[0])
    for m in maps[1:]:
        _check_manifest(maps[0], m)

    g = np.zeros((k, k))
    for name in names:
        x = np.stack([np.asarray(m[name], dtype=np.float64).ravel() for m in maps])
        x -= x.mean(axis=0)
        for i in range(k):
            for j in range(i, k):
                v = float(np.add.reduce(x[i] * x[j]))
                g[i, j] += v
                if i != j:
                    g[j, i] += v

    evals, evecs = np.linalg.eigh(g)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # fix eigenvector signs: largest-magnitude entry positive
    for c in range(k):
        j = int(np.argmax(np.abs(evecs[:, c])))
        if evecs[j, c] < 0:
            evecs[:, c] = -evecs[:, c]
    total = float(evals.sum())
    tol = (evals[0] if evals.size else 0.0) * k * np.finfo(float).eps * 10
    rank = int(np.count_nonzero(evals > tol))
    ratios = (evals / total if total > 0 else np.zeros_like(evals))[:n_components]
    coords = evecs[:, :n_components] * np.sqrt(evals[:n_components])
    notes = []
    if rank < n_components:
        notes.append(f"rank deficient: {rank} nonzero components, {n_components} requested")
        log.warning(notes[-1])
    ids = list(point_ids) if point_ids is not None else [str(i) for i in range(k)]
    return PcaReport(point_ids=ids, coordinates=coords.tolist(),
                     explained_variance_ratio=ratios.tolist(), rank=rank, notes=notes)
