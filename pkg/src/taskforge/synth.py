"""Synthetic task vectors with controlled geometry, and checks of the
orthogonal-composition predictions against them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry
from .merge import MergeSpec, merge
from .rng import numpy_generator
from .taskvec import TaskVector

MODES = ("disjoint", "gaussian", "cosine")
# measured task-vector L2 norms of the five recording groups G1..G5
GROUP_NORMS = (13.58, 9.51, 6.86, 1.45, 4.79)
SYNTH_BASE = "synthetic"


@dataclass
class SynthSpec:
    n_vectors: int
    dim: int
    target_norms: Sequence[float] = field(default_factory=list)
    mode: str = "gaussian"
    target_cosine: float = 0.0
    sparsity: float = 0.0
    seed: int = 0
    n_tensors: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.n_vectors < 1 or self.dim < 1:
            raise ValueError("n_vectors and dim must be positive")
        if self.target_norms and len(self.target_norms) != self.n_vectors:
            raise ValueError("one target norm per vector")
        if any(n <= 0 for n in self.target_norms):
            raise ValueError("target norms must be positive")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must be in [0, 1)")
        if self.mode == "disjoint" and self.dim < self.n_vectors:
            raise ValueError("disjoint supports need dim >= n_vectors")
        if self.mode == "cosine":
            if self.dim < self.n_vectors:
                raise ValueError("controlled cosine needs dim >= n_vectors")
            if abs(self.target_cosine) > 1:
                raise ValueError(f"infeasible target cosine {self.target_cosine}")
        if not 1 <= self.n_tensors <= self.dim:
            raise ValueError("n_tensors must be in [1, dim]")

    @property
    def norms(self) -> list[float]:
        return list(self.target_norms) if self.target_norms else [1.0] * self.n_vectors


def _split(flat: np.ndarray, n_tensors: int, dtype) -> dict:
    parts = np.array_split(flat, n_tensors)
    return {f"layers.{i}.weight": p.astype(dtype) for i, p in enumerate(parts)}


def _scale_to(v: np.ndarray, norm: float) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot scale a zero vector; lower the sparsity")
    return v * (norm / n)


def _sparsify(v: np.ndarray, sparsity: float, g: np.random.Generator, support: np.ndarray | None = None) -> np.ndarray:
    if sparsity <= 0:
        return v
    idx = np.arange(v.size) if support is None else support
    n_zero = int(round(sparsity * idx.size))
    if n_zero >= idx.size:
        n_zero = idx.size - 1
    v = v.copy()
    v[g.choice(idx, size=n_zero, replace=False)] = 0.0
    return v


def gram_factor(n: int, cosine: float, norms: Sequence[float]) -> np.ndarray:
    """Lower-triangular L with ``L L^T`` = the Gram matrix of the target geometry."""
    norms = np.asarray(norms, dtype=np.float64)
    corr = np.full((n, n), cosine)
    np.fill_diagonal(corr, 1.0)
    gram = corr * np.outer(norms, norms)
    evals = np.linalg.eigvalsh(corr)
    if evals.min() < -1e-12:
        raise ValueError(f"target cosine {cosine} is infeasible for {n} vectors (Gram not positive semidefinite)")
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        # singular but PSD (cosine = 1 or -1/(n-1)): factor through the eigendecomposition
        w, v = np.linalg.eigh(gram)
        return v * np.sqrt(np.clip(w, 0.0, None))


def generate(spec: SynthSpec, dtype=np.float64) -> list[TaskVector]:
    """Vectors are float64 by default so targets hold to ~1e-12; files store float32."""
    spec.validate()
    g = numpy_generator(spec.seed, "synth", spec.mode)
    n, d = spec.n_vectors, spec.dim
    norms = spec.norms
    vecs = []
    if spec.mode == "disjoint":
        blocks = np.array_split(np.arange(d), n)
        for i in range(n):
            v = np.zeros(d)
            v[blocks[i]] = g.standard_normal(blocks[i].size)
            v = _sparsify(v, spec.sparsity, g, blocks[i])
            vecs.append(_scale_to(v, norms[i]))
    elif spec.mode == "gaussian":
        for i in range(n):
            v = _sparsify(g.standard_normal(d), spec.sparsity, g)
            vecs.append(_scale_to(v, norms[i]))
    else:
        if spec.sparsity:
            raise ValueError("sparsity is not supported with controlled cosine")
        q, _ = np.linalg.qr(g.standard_normal((d, n)))
        lower = gram_factor(n, spec.target_cosine, norms)
        vecs = list((q @ lower.T).T)
    return [
        TaskVector(delta=_split(v, spec.n_tensors, dtype), specialist_id=f"synth{i}", base_hash=SYNTH_BASE)
        for i, v in enumerate(vecs)
    ]


def ties_discard_fractions(tvs: Sequence[TaskVector], ks: Sequence[float] = (0.1, 0.2, 0.5, 0.8)) -> dict:
    """Per k, the fraction of each vector's nonzero entries that TIES leaves out of the merge."""
    out = {}
    for k in ks:
        _, rep = merge(tvs, MergeSpec("ties", trim_fraction=k))
        fracs = {}
        for tv in tvs:
            nz = sum(int(np.count_nonzero(x)) for x in tv.delta.values())
            d = sum(x.size for x in tv.delta.values())
            kept = rep.retained_fraction[tv.specialist_id] * d
            fracs[tv.specialist_id] = 1.0 - kept / nz if nz else 0.0
        out[repr(float(k))] = fracs
    return out


def verify_predictions(tvs: Sequence[TaskVector], ks: Sequence[float] = (0.1, 0.2, 0.5, 0.8)) -> dict:
    """Displacement predictions, pairwise sign agreement and TIES discard rates as a JSON-ready dict."""
    if len(tvs) < 2:
        raise ValueError("need at least 2 task vectors")
    disp = []
    for i in range(len(tvs)):
        r = geometry.displacement_check(tvs, i)
        err = abs(r["actual"] - r["predicted"])
        disp.append({
            "vector_id": tvs[i].specialist_id,
            "actual": r["actual"],
            "predicted": r["predicted"],
            "abs_error": err,
            "rel_error": err / r["actual"] if r["actual"] else err,
            "cross_term_bound": r["bound"],
            "within_bound": err <= r["bound"] * (1 + 1e-9) + 1e-12,
        })
    sign = []
    for i in range(len(tvs)):
        for j in range(i + 1, len(tvs)):
            sign.append({"a": tvs[i].specialist_id, "b": tvs[j].specialist_id,
                         "sign_agreement": geometry.sign_agreement(tvs[i], tvs[j])})
    return {
        "n_vectors": len(tvs),
        "displacement": disp,
        "sign_agreement": sign,
        "ties_discarded_fraction": ties_discard_fractions(tvs, ks),
    }
