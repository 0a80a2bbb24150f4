"""JSON/CSV report writing with provenance, and schema checks on what was written."""

from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from . import __version__
from .tensor_store import config_hash_of

TOOL = "taskforge"

PROVENANCE_SCHEMA = {
    "type": "object",
    "required": ["tool", "version", "config_hash", "seeds", "kind"],
    "properties": {
        "tool": {"const": TOOL},
        "version": {"type": "string"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seeds": {"type": "object"},
        "kind": {"type": "string"},
    },
}

_matrix = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_numbers = {"type": "array", "items": {"type": "number"}}

SCHEMAS = {
    "merge": {
        "type": "object",
        "required": ["strategy", "params", "vector_ids", "retained_fraction"],
        "properties": {
            "retained_fraction": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        },
    },
    "geometry": {
        "type": "object",
        "required": ["vector_ids", "cosine", "sign_agreement", "l2_norms", "mean_abs", "sparsity", "threshold"],
        "properties": {"cosine": _matrix, "sign_agreement": _matrix, "l2_norms": _numbers, "sparsity": _numbers},
    },
    "layers": {
        "type": "object",
        "required": ["layer_labels", "per_layer_norms", "per_layer_mean_cosine"],
    },
    "pca": {"type": "object", "required": ["point_ids", "coordinates", "explained_variance_ratio"]},
    "summary": {"type": "object", "required": ["rows"]},
}


def _clean(obj):
    """Make numpy scalars/arrays JSON-friendly; non-finite floats become None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def envelope(kind: str, payload: dict, config: dict, seeds: dict | None = None) -> dict:
    return {
        "tool": TOOL,
        "version": __version__,
        "kind": kind,
        "config_hash": config_hash_of(_clean(config)),
        "seeds": _clean(seeds or {}),
        **_clean(payload),
    }


def validate(doc: dict) -> None:
    jsonschema.validate(doc, PROVENANCE_SCHEMA)
    schema = SCHEMAS.get(doc["kind"])
    if schema is not None:
        jsonschema.validate(doc, schema)


def write_json(path: str | Path, doc: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(doc), indent=2, sort_keys=True) + "\n")
    return path


def write_report(path: str | Path, kind: str, payload: dict, config: dict, seeds: dict | None = None,
                 timing: dict | None = None) -> Path:
    """Write a provenance-stamped report; wall-clock data goes to a ``.timing.json`` sidecar."""
    doc = envelope(kind, payload, config, seeds)
    validate(doc)
    path = write_json(path, doc)
    if timing is not None:
        write_json(path.with_suffix(".timing.json"), {"written_at": time.time(), **timing})
    return path


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return path


def write_matrix_csv(path: str | Path, ids: Sequence[str], matrix) -> Path:
    return write_csv(path, ["id", *ids], ([i, *map(float, row)] for i, row in zip(ids, matrix)))


def read_correctness(path: str | Path, column: str | None = None):
    """0/1 correctness per row from a CSV with a ``correct`` column (or ``column``, or the only column)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    try:
        [float(v) for v in header]
        has_header = False
    except ValueError:
        has_header = True
    body = rows[1:] if has_header else rows
    if has_header:
        col = column or ("correct" if "correct" in header else header[-1])
        if col not in header:
            raise ValueError(f"{path}: no column {col!r}")
        j = header.index(col)
    else:
        j = len(header) - 1
    return np.array([int(float(r[j])) for r in body], dtype=np.int64)


def write_correctness(path: str | Path, correctness) -> Path:
    return write_csv(path, ["index", "correct"], ((i, int(c)) for i, c in enumerate(correctness)))
