"""Named-tensor checkpoints in the safetensors container layout.

File layout: an 8-byte little-endian header length ``N``, ``N`` bytes of
JSON mapping tensor name to ``{"dtype", "shape", "data_offsets"}`` plus an
optional ``"__metadata__"`` string map, then the concatenated little-endian
payload. Offsets are relative to the start of the payload.

Writing is canonical: names sorted, compact JSON with sorted keys, header
padded with spaces to a multiple of 8 bytes, float32 payload. Equal
content therefore always produces equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

TensorMap = dict  # name -> float32 ndarray; kept as a plain dict

_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}
_MAX_EXTENT = 2**63 - 1
MODEL_ID = "model_id"
CONFIG_HASH = "config_hash"


class CheckpointError(ValueError):
    """Malformed container or a tensor map that violates its invariants."""


class ShapeConflictError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict
    metadata: dict = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        return self.metadata.get(MODEL_ID, "")

    @property
    def config_hash(self) -> str | None:
        return self.metadata.get(CONFIG_HASH) or None

    @property
    def key_manifest(self) -> list[str]:
        return sorted(self.tensors)

    @property
    def n_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or self.key_manifest != other.key_manifest:
            return False
        return all(tensors_identical(self.tensors[k], other.tensors[k]) for k in self.tensors)


def tensors_identical(a: np.ndarray, b: np.ndarray) -> bool:
    """Bitwise equality of shape and float32 payload."""
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def as_tensor_map(tensors: Mapping[str, object], allow_nonfinite: bool = False) -> TensorMap:
    """Copy ``tensors`` into a name-sorted dict of float32 arrays, validating it."""
    out = {}
    for name in sorted(tensors):
        if not isinstance(name, str):
            raise CheckpointError(f"tensor name must be a string, got {type(name).__name__}")
        arr = np.asarray(tensors[name], dtype=np.float32)
        if not allow_nonfinite and arr.size and not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name!r} contains NaN or Inf")
        out[name] = arr
    return out


def validate_tensor_map(tensors: Mapping[str, np.ndarray], allow_nonfinite: bool = False) -> None:
    for name, arr in tensors.items():
        if not isinstance(name, str):
            raise CheckpointError(f"tensor name must be a string, got {type(name).__name__}")
        shape = tuple(arr.shape)
        if any(d < 0 or d > _MAX_EXTENT for d in shape):
            raise CheckpointError(f"tensor {name!r}: shape {shape} out of range")
        if math.prod(shape) > _MAX_EXTENT:
            raise CheckpointError(f"tensor {name!r}: shape {shape} overflows 64-bit extents")
        if not allow_nonfinite and arr.size and not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name!r} contains NaN or Inf")


# -- serialization ---------------------------------------------------------


def dumps(ckpt: Checkpoint) -> bytes:
    validate_tensor_map(ckpt.tensors, allow_nonfinite=True)
    header: dict = {}
    offset = 0
    payload = []
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")
        raw = arr.tobytes()
        header[name] = {
            "dtype": "F32",
            "shape": [int(d) for d in arr.shape],
            "data_offsets": [offset, offset + len(raw)],
        }
        payload.append(raw)
        offset += len(raw)
    if ckpt.metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in ckpt.metadata.items()}
    text = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + b"".join(payload)


def _no_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise CheckpointError(f"duplicate tensor name {key!r} in header")
        out[key] = value
    return out


def loads(data: bytes, strict: bool = True) -> Checkpoint:
    """Parse container bytes. ``strict`` rejects NaN/Inf payloads."""
    if len(data) < 8:
        raise CheckpointError("malformed header: file shorter than 8 bytes")
    (hlen,) = struct.unpack("<Q", data[:8])
    if hlen > len(data) - 8:
        raise CheckpointError("malformed header: declared header length exceeds file size")
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"), object_pairs_hook=_no_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointError("malformed header: top level is not an object")
    payload = memoryview(data)[8 + hlen :]

    metadata = header.pop("__metadata__", None) or {}
    if not isinstance(metadata, dict) or not all(isinstance(v, str) for v in metadata.values()):
        raise CheckpointError("malformed header: __metadata__ must map strings to strings")

    tensors = {}
    for name in sorted(header):
        entry = header[name]
        try:
            dtype = _DTYPES[entry["dtype"]]
            shape = [int(d) for d in entry["shape"]]
            begin, end = (int(v) for v in entry["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"malformed header entry for {name!r}: {entry!r}") from None
        if any(d < 0 for d in shape) or begin < 0 or end < begin:
            raise CheckpointError(f"malformed header entry for {name!r}: {entry!r}")
        if end - begin != math.prod(shape) * dtype.itemsize:
            raise CheckpointError(
                f"shape/data mismatch for {name!r}: shape {shape} needs "
                f"{math.prod(shape) * dtype.itemsize} bytes, offsets span {end - begin}"
            )
        if end > len(payload):
            raise CheckpointError(f"shape/data mismatch for {name!r}: offsets run past end of file")
        arr = np.frombuffer(payload[begin:end], dtype=dtype).astype(np.float32).reshape(shape)
        if strict and arr.size and not np.isfinite(arr).all():
            raise CheckpointError(f"tensor {name!r} contains NaN or Inf")
        arr.flags.writeable = False
        tensors[name] = arr
    return Checkpoint(tensors=tensors, metadata=dict(metadata))


def load_checkpoint(path: str | Path, strict: bool = True) -> Checkpoint:
    return loads(Path(path).read_bytes(), strict=strict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    data = dumps(ckpt)  # serialize first so a bad checkpoint leaves no directory behind
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def save_debug(ckpt: Checkpoint, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest and metadata) and ``<path>.bin`` (raw payload).

    Debugging aid only; nothing in the package reads this format back.
    """
    path = Path(path)
    manifest = {"metadata": dict(ckpt.metadata), "tensors": []}
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name in sorted(ckpt.tensors):
            raw = np.asarray(ckpt.tensors[name], dtype="<f4", order="C").tobytes()
            fh.write(raw)
            manifest["tensors"].append(
                {"name": name, "shape": list(ckpt.tensors[name].shape), "offset": offset, "nbytes": len(raw)}
            )
            offset += len(raw)
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return json_path, path.with_suffix(".bin")


# -- alignment -------------------------------------------------------------


@dataclass
class AlignReport:
    common: list[str]
    missing: list[list[str]]
    conflicts: dict[str, list[tuple[int, ...] | None]]


def align_keys(maps: Iterable[Mapping[str, np.ndarray]], strict: bool = True) -> AlignReport:
    """Intersect the name sets of ``maps``.

    ``missing[i]`` lists names present in some other map but absent from map i.
    A shared name whose shapes disagree is a conflict: an error when
    ``strict``, otherwise reported and excluded from ``common``.
    """
    maps = list(maps)
    if not maps:
        raise ValueError("align_keys needs at least one map")
    names = [set(m) for m in maps]
    union = set().union(*names)
    shared = set.intersection(*names)
    conflicts = {}
    for name in sorted(union):
        shapes = [tuple(m[name].shape) if name in m else None for m in maps]
        present = {s for s in shapes if s is not None}
        if len(present) > 1:
            conflicts[name] = shapes
    if conflicts and strict:
        name, shapes = next(iter(conflicts.items()))
        raise ShapeConflictError(f"shape conflict on {name!r}: {shapes}")
    common = sorted(shared - set(conflicts))
    missing = [sorted(union - s) for s in names]
    return AlignReport(common=common, missing=missing, conflicts=conflicts)


# -- hashing ---------------------------------------------------------------


def config_hash(canonical_config: bytes) -> str:
    return hashlib.sha256(canonical_config).hexdigest()


def canonical_json(obj) -> bytes:
    """Canonical JSON bytes: sorted keys, no insignificant whitespace, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def config_hash_of(obj) -> str:
    return config_hash(canonical_json(obj))


def content_hash(tensors: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, shapes and float32 payloads in sorted-name order."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        h.update(name.encode("utf-8") + b"\x00")
        h.update(json.dumps(list(arr.shape)).encode() + b"\x00")
        h.update(arr.tobytes())
    return h.hexdigest()


def verify_config_hash(ckpt: Checkpoint, canonical_config: bytes) -> bool:
    return ckpt.config_hash == config_hash(canonical_config)
