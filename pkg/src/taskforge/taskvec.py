"""Task vectors: extraction from specialist checkpoints and exact arithmetic."""

from __future__ import annotations

import fnmatch
import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .parallel import ordered_map
from .tensor_store import Checkpoint, CheckpointError, ShapeConflictError, content_hash

log = logging.getLogger(__name__)

SPECIALIST_ID = "specialist_id"
BASE_HASH = "base_hash"
KIND = "kind"


class IncompatibleTaskVectors(ValueError):
    """Task vectors with different bases or manifests cannot be combined."""


@dataclass
class TaskVector:
    delta: dict
    specialist_id: str
    base_hash: str

    @property
    def key_manifest(self) -> list[str]:
        return sorted(self.delta)

    def to_checkpoint(self) -> Checkpoint:
        meta = {SPECIALIST_ID: self.specialist_id, BASE_HASH: self.base_hash, KIND: "task_vector"}
        return Checkpoint(tensors=dict(self.delta), metadata=meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, specialist_id: str | None = None) -> "TaskVector":
        sid = specialist_id or ckpt.metadata.get(SPECIALIST_ID) or ckpt.model_id
        if not sid:
            raise CheckpointError("task vector file carries no specialist_id")
        return cls(delta=dict(ckpt.tensors), specialist_id=sid, base_hash=ckpt.metadata.get(BASE_HASH, ""))


def base_hash_of(base: Checkpoint) -> str:
    """Provenance hash of a base checkpoint: its config hash, else a content hash."""
    return base.config_hash or content_hash(base.tensors)


def excluded(name: str, patterns: Sequence[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def extract(
    base: Checkpoint,
    specialist: Checkpoint,
    exclude: Sequence[str] = (),
    specialist_id: str | None = None,
    force: bool = False,
) -> TaskVector:
    """``specialist - base`` over the tensors not matched by ``exclude`` globs.

    A specialist whose metadata names a different ``base_hash`` is rejected
    unless ``force`` is set.
    """
    bhash = base_hash_of(base)
    claimed = specialist.metadata.get(BASE_HASH)
    if claimed and claimed != bhash:
        if not force:
            raise IncompatibleTaskVectors(
                f"specialist {specialist.model_id or specialist_id!r} was trained from base "
                f"{claimed[:12]}..., not {bhash[:12]}..."
            )
        log.warning("FORCED: base hash mismatch for %s (%s != %s)", specialist_id, claimed, bhash)

    keys_b = [k for k in base.tensors if not excluded(k, exclude)]
    keys_s = [k for k in specialist.tensors if not excluded(k, exclude)]
    if sorted(keys_b) != sorted(keys_s):
        only_b = sorted(set(keys_b) - set(keys_s))
        only_s = sorted(set(keys_s) - set(keys_b))
        raise CheckpointError(f"manifest mismatch after exclusion: base-only {only_b}, specialist-only {only_s}")
    delta = {}
    for name in sorted(keys_b):
        b, s = base.tensors[name], specialist.tensors[name]
        if b.shape != s.shape:
            raise ShapeConflictError(f"shape conflict on {name!r}: base {b.shape}, specialist {s.shape}")
        delta[name] = (s.astype(np.float64) - b.astype(np.float64)).astype(np.float32)
    sid = specialist_id or specialist.model_id or "specialist"
    return TaskVector(delta=delta, specialist_id=sid, base_hash=bhash)


def apply(base: Checkpoint, tv: Mapping[str, np.ndarray] | TaskVector, scale: float = 1.0,
          model_id: str | None = None) -> Checkpoint:
    """``base + scale * tv`` on the names in ``tv``; other tensors are copied."""
    delta = tv.delta if isinstance(tv, TaskVector) else tv
    missing = sorted(set(delta) - set(base.tensors))
    if missing:
        raise CheckpointError(f"task vector names absent from base: {missing}")
    out = dict(base.tensors)
    for name in sorted(delta):
        b, d = base.tensors[name], np.asarray(delta[name])
        if b.shape != d.shape:
            raise ShapeConflictError(f"shape conflict on {name!r}: base {b.shape}, delta {d.shape}")
        out[name] = (b.astype(np.float64) + float(scale) * d.astype(np.float64)).astype(np.float32)
    meta = dict(base.metadata)
    if model_id is not None:
        meta["model_id"] = model_id
    return Checkpoint(tensors=out, metadata=meta)


def check_combinable(tvs: Sequence[TaskVector], force: bool = False) -> list[str]:
    """Return the shared manifest, raising if bases or manifests differ."""
    if not tvs:
        raise ValueError("need at least one task vector")
    manifest = tvs[0].key_manifest
    for tv in tvs[1:]:
        if tv.key_manifest != manifest:
            raise IncompatibleTaskVectors(
                f"manifest of {tv.specialist_id!r} differs from {tvs[0].specialist_id!r}"
            )
        for name in manifest:
            if tv.delta[name].shape != tvs[0].delta[name].shape:
                raise ShapeConflictError(f"shape conflict on {name!r} between task vectors")
    hashes = {tv.base_hash for tv in tvs}
    if len(hashes) > 1:
        if not force:
            raise IncompatibleTaskVectors(f"task vectors come from different bases: {sorted(hashes)}")
        log.warning("FORCED: combining task vectors from different bases %s", sorted(hashes))
    return manifest


def combine64(tvs: Sequence[TaskVector], coeffs: Sequence[float], force: bool = False) -> dict:
    """Float64 ``sum_i coeffs[i] * tvs[i]``, accumulated in input order."""
    if len(tvs) != len(coeffs):
        raise ValueError(f"{len(tvs)} task vectors but {len(coeffs)} coefficients")
    manifest = check_combinable(tvs, force)

    def one(name):
        acc = np.zeros(tvs[0].delta[name].shape, dtype=np.float64)
        for tv, c in zip(tvs, coeffs):
            acc += float(c) * tv.delta[name].astype(np.float64)
        return acc

    return dict(zip(manifest, ordered_map(one, manifest)))


def linear_combine(tvs: Sequence[TaskVector], coeffs: Sequence[float], force: bool = False) -> dict:
    return to_float32(combine64(tvs, coeffs, force))


def to_float32(tensors: Mapping[str, np.ndarray]) -> dict:
    return {k: np.asarray(v).astype(np.float32) for k, v in sorted(tensors.items())}


def flat64(tensors: Mapping[str, np.ndarray]) -> np.ndarray:
    """Concatenate tensors in sorted-name order as one float64 vector."""
    if not tensors:
        return np.zeros(0)
    return np.concatenate([np.asarray(tensors[k], dtype=np.float64).ravel() for k in sorted(tensors)])
