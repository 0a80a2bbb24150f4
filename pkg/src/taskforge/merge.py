"""Merge strategies over task vectors.

Every strategy returns a float32 tensor map holding the merged *delta*;
add it to the base with :func:`taskforge.taskvec.apply`. Arithmetic runs
in float64 with reductions in a fixed (vector, name, index) order, and
stochastic masks come from the counter-based streams in :mod:`taskforge.rng`,
so outputs are bit-identical for any thread count.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels, rng
from .parallel import ordered_map
from .taskvec import TaskVector, apply, check_combinable, to_float32
from .tensor_store import Checkpoint

STRATEGIES = (
    "simple_average",
    "task_arithmetic",
    "dare",
    "ties",
    "dare_ties",
    "della",
    "norm_adjusted",
    "negation",
)
STOCHASTIC = ("dare", "dare_ties", "della")
SIGN_ELECTING = ("ties", "dare_ties", "della")


@dataclass
class MergeSpec:
    """Strategy plus every hyperparameter. Unused fields are kept for provenance."""

    strategy: str = "simple_average"
    lam: float = 1.0
    drop_rate: float = 0.0
    trim_fraction: float = 0.0
    gamma: float = 0.0
    beta: float = 1.0
    base_seed: int = 42
    seed_policy: str = "by_name"
    trim_scope: str = "global"
    della_max_scope: str = "per_tensor"

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop rate must be in [0, 1), got {self.drop_rate}")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ValueError(f"trim fraction k must be in [0, 1), got {self.trim_fraction}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.seed_policy not in ("by_name", "by_index"):
            raise ValueError(f"unknown seed policy {self.seed_policy!r}")
        if self.trim_scope not in ("global", "per_tensor"):
            raise ValueError(f"unknown trim scope {self.trim_scope!r}")
        if self.della_max_scope not in ("per_tensor", "global"):
            raise ValueError(f"unknown DELLA max scope {self.della_max_scope!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass
class MergeReport:
    strategy: str
    params: dict
    vector_ids: list[str]
    retained_fraction: dict[str, float]
    sign_conflicts: int | None = None
    elected_signs: dict[str, int] | None = None
    weights: dict[str, float] | None = None
    notes: list[str] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d


# -- trimming --------------------------------------------------------------


def n_trimmed(k: float, d: int) -> int:
    """Number of entries the bottom-``k`` trim removes from ``d``."""
    x = k * d
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 else int(math.floor(x))


def _trim_keep(absvals: np.ndarray, m: int) -> np.ndarray:
    """Keep-mask dropping the ``m`` smallest magnitudes; ties dropped earliest-first."""
    n = absvals.size
    if m <= 0:
        return np.ones(n, dtype=bool)
    if m >= n:
        return np.zeros(n, dtype=bool)
    thr = np.partition(absvals, m - 1)[m - 1]
    keep = absvals > thr
    at_thr = np.flatnonzero(absvals == thr)
    drop_at_thr = m - int(np.count_nonzero(absvals < thr))
    keep[at_thr[drop_at_thr:]] = True
    return keep


def trim(vec: dict, k: float, scope: str = "global") -> dict:
    """Zero the bottom-``k`` fraction of entries by magnitude.

    ``global`` ranks across the whole vector flattened in sorted-name order;
    ``per_tensor`` ranks inside each tensor. Output is float64.
    """
    names = sorted(vec)
    out = {n: np.asarray(vec[n], dtype=np.float64) for n in names}
    if k <= 0:
        return out
    if scope == "per_tensor":
        for n in names:
            flat = out[n].ravel()
            keep = _trim_keep(np.abs(flat), n_trimmed(k, flat.size))
            out[n] = np.where(keep, flat, 0.0).reshape(out[n].shape)
        return out
    sizes = [out[n].size for n in names]
    absvals = np.concatenate([np.abs(out[n]).ravel() for n in names]) if names else np.zeros(0)
    keep = _trim_keep(absvals, n_trimmed(k, absvals.size))
    pos = 0
    for n, size in zip(names, sizes):
        kk = keep[pos : pos + size].reshape(out[n].shape)
        out[n] = np.where(kk, out[n], 0.0)
        pos += size
    return out


# -- helpers ---------------------------------------------------------------


def _canonical(tvs: Sequence[TaskVector]) -> list[tuple[int, TaskVector]]:
    """(original index, vector) pairs sorted by specialist id."""
    return sorted(enumerate(tvs), key=lambda p: p[1].specialist_id)


def _mean64(rows: list[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(rows[0], dtype=np.float64)
    for r in rows:
        acc += r
    return acc / len(rows)


def _stream(spec: MergeSpec, index: int, tv: TaskVector) -> int:
    return rng.stream_seed(spec.base_seed, tv.specialist_id, index, spec.seed_policy)


def _sparsify(spec: MergeSpec, ordered, manifest) -> tuple[list[dict], list[int]]:
    """DARE or DELLA sparsified float64 copies of every vector, plus kept counts."""
    out, kept_counts = [], []
    for index, tv in ordered:
        seed = _stream(spec, index, tv)
        global_max = 0.0
        if spec.strategy == "della" and spec.della_max_scope == "global":
            global_max = max((float(np.max(np.abs(tv.delta[n]))) for n in manifest if tv.delta[n].size), default=0.0)

        def one(name, tv=tv, seed=seed, global_max=global_max):
            x = tv.delta[name]
            key = rng.tensor_key(seed, name)
            if spec.strategy == "della":
                if spec.della_max_scope == "global":
                    mx = global_max
                else:
                    mx = float(np.max(np.abs(x))) if x.size else 0.0
                vals, kept = kernels.della_sparsify(x, key, spec.drop_rate, mx)
            else:
                vals, kept = kernels.dare_sparsify(x, key, spec.drop_rate)
            return vals.reshape(x.shape), kept

        results = ordered_map(one, manifest)
        out.append({n: r[0] for n, r in zip(manifest, results)})
        kept_counts.append(sum(r[1] for r in results))
    return out, kept_counts


def _elect(vectors: list[dict], manifest: list[str]):
    def one(name):
        stack = np.stack([v[name].ravel() for v in vectors]) if vectors[0][name].size else np.zeros((len(vectors), 0))
        return kernels.ties_elect_merge(stack)

    results = ordered_map(one, manifest)
    merged = {n: r[0].reshape(vectors[0][n].shape) for n, r in zip(manifest, results)}
    contrib = np.zeros(len(vectors), dtype=np.int64)
    conflicts = n_pos = n_neg = n_zero = 0
    for r in results:
        contrib += r[1]
        conflicts += r[2]
        n_pos += r[3]
        n_neg += r[4]
        n_zero += r[5]
    return merged, contrib, conflicts, {"positive": n_pos, "negative": n_neg, "zero": n_zero}


def vector_norm(tensors: dict) -> float:
    sq = 0.0
    for name in sorted(tensors):
        x = np.asarray(tensors[name], dtype=np.float64)
        sq += float(np.add.reduce(x * x, axis=None))
    return math.sqrt(sq)


# -- entry point -----------------------------------------------------------


def merge(tvs: Sequence[TaskVector], spec: MergeSpec, force: bool = False) -> tuple[dict, MergeReport]:
    """Run ``spec`` over ``tvs`` and return ``(merged delta, report)``."""
    spec.validate()
    t0 = time.perf_counter()
    tvs = list(tvs)
    manifest = check_combinable(tvs, force)
    ordered = _canonical(tvs)
    ids = [tv.specialist_id for _, tv in ordered]
    d = sum(int(tvs[0].delta[n].size) for n in manifest)
    n_vec = len(ordered)

    def frac(count):
        return float(count) / d if d else 0.0

    def nonzero_fraction(tv):
        return frac(sum(int(np.count_nonzero(tv.delta[n])) for n in manifest))

    report = MergeReport(strategy=spec.strategy, params=spec.to_dict(), vector_ids=ids, retained_fraction={})
    s = spec.strategy

    if s in ("simple_average", "task_arithmetic", "negation"):
        if s == "negation" and n_vec != 1:
            raise ValueError("negation takes exactly one task vector")

        def one(name):
            m = _mean64([tv.delta[name].astype(np.float64) for _, tv in ordered])
            if s == "task_arithmetic":
                m = spec.lam * m
            elif s == "negation":
                m = -spec.beta * m
            return m

        merged = dict(zip(manifest, ordered_map(one, manifest)))
        report.retained_fraction = {tv.specialist_id: nonzero_fraction(tv) for _, tv in ordered}
        if s == "task_arithmetic":
            report.notes.append("task arithmetic scales the mean: lambda * (1/N) * sum(tau)")

    elif s == "norm_adjusted":
        norms = [vector_norm(tv.delta) for _, tv in ordered]
        if spec.gamma > 0 and any(n == 0.0 for n in norms):
            raise ValueError("norm-adjusted weighting with gamma > 0 needs nonzero task vectors")
        raw = [n ** (-spec.gamma) if spec.gamma > 0 else 1.0 for n in norms]
        total = math.fsum(raw)

        def one(name):
            acc = np.zeros(tvs[0].delta[name].shape, dtype=np.float64)
            for w, (_, tv) in zip(raw, ordered):
                acc += w * tv.delta[name].astype(np.float64)
            return spec.lam * (acc / total)

        merged = dict(zip(manifest, ordered_map(one, manifest)))
        report.weights = {i: w / total for i, w in zip(ids, raw)}
        report.retained_fraction = {tv.specialist_id: nonzero_fraction(tv) for _, tv in ordered}
        report.notes.append("weights renormalized to sum to 1 before lambda")

    elif s == "dare":
        sparse, kept = _sparsify(spec, ordered, manifest)
        merged = {n: _mean64([v[n] for v in sparse]) for n in manifest}
        report.retained_fraction = {
            i: frac(sum(int(np.count_nonzero(v[n])) for n in manifest)) for i, v in zip(ids, sparse)
        }

    else:  # ties family
        if s == "ties":
            vectors = [{n: tv.delta[n] for n in manifest} for _, tv in ordered]
        else:
            vectors, _ = _sparsify(spec, ordered, manifest)
        trimmed = [trim(v, spec.trim_fraction, spec.trim_scope) for v in vectors]
        merged, contrib, conflicts, tally = _elect(trimmed, manifest)
        report.retained_fraction = {i: frac(c) for i, c in zip(ids, contrib)}
        report.sign_conflicts = conflicts
        report.elected_signs = tally
        report.notes.append("sign election: strict majority of nonzero signs; tie -> sign of sum; zero sum -> 0")

    if s in STOCHASTIC:
        report.notes.append(f"seed policy {spec.seed_policy}, base seed {spec.base_seed}")
    report.wall_time = time.perf_counter() - t0
    return to_float32(merged), report


def merge_simple_average(tvs, force: bool = False) -> dict:
    return merge(tvs, MergeSpec("simple_average"), force)[0]


def merge_task_arithmetic(tvs, lam: float, force: bool = False) -> dict:
    return merge(tvs, MergeSpec("task_arithmetic", lam=lam), force)[0]


def merge_dare(tvs, drop_rate: float, base_seed: int = 42, seed_policy: str = "by_name",
               force: bool = False) -> dict:
    spec = MergeSpec("dare", drop_rate=drop_rate, base_seed=base_seed, seed_policy=seed_policy)
    return merge(tvs, spec, force)[0]


def merge_ties(tvs, trim_fraction: float, trim_scope: str = "global", force: bool = False) -> dict:
    return merge(tvs, MergeSpec("ties", trim_fraction=trim_fraction, trim_scope=trim_scope), force)[0]


def merge_dare_ties(tvs, drop_rate: float, trim_fraction: float, base_seed: int = 42,
                    seed_policy: str = "by_name", force: bool = False) -> dict:
    spec = MergeSpec("dare_ties", drop_rate=drop_rate, trim_fraction=trim_fraction,
                     base_seed=base_seed, seed_policy=seed_policy)
    return merge(tvs, spec, force)[0]


def merge_della(tvs, p_target: float, trim_fraction: float, base_seed: int = 42,
                seed_policy: str = "by_name", max_scope: str = "per_tensor", force: bool = False) -> dict:
    spec = MergeSpec("della", drop_rate=p_target, trim_fraction=trim_fraction, base_seed=base_seed,
                     seed_policy=seed_policy, della_max_scope=max_scope)
    return merge(tvs, spec, force)[0]


def merge_norm_adjusted(tvs, gamma: float, lam: float = 1.0, force: bool = False) -> dict:
    return merge(tvs, MergeSpec("norm_adjusted", gamma=gamma, lam=lam), force)[0]


def negate_domain(source: Checkpoint, tau_focal: TaskVector, beta_grid: Sequence[float]) -> list[Checkpoint]:
    """One checkpoint ``source - beta * tau_focal`` per beta."""
    missing = sorted(set(tau_focal.delta) - set(source.tensors))
    if missing:
        raise ValueError(f"manifest mismatch: task vector names absent from source: {missing}")
    return [apply(source, tau_focal, -float(b)) for b in beta_grid]


def random_control_vector(template: TaskVector, seed: int) -> TaskVector:
    """Gaussian direction with each tensor's L2 norm matched to ``template``."""
    out = {}
    for name in sorted(template.delta):
        x = template.delta[name]
        target = vector_norm({name: x})
        g = rng.numpy_generator(seed, name).standard_normal(x.shape)
        gn = float(np.sqrt(np.add.reduce(g * g, axis=None))) if g.size else 0.0
        out[name] = (g * (target / gn) if gn > 0 else np.zeros(x.shape)).astype(np.float32)
    return TaskVector(delta=out, specialist_id=f"random-control-{seed}", base_hash=template.base_hash)
