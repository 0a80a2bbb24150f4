"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
fallback is imported. Set ``TASKFORGE_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("TASKFORGE_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
uniform_block = _impl.uniform_block
dare_sparsify = _impl.dare_sparsify
della_sparsify = _impl.della_sparsify
ties_elect_merge = _impl.ties_elect_merge
sign_agree_count = _impl.sign_agree_count


def available_backends() -> dict:
    """Map backend name to module for every backend importable here."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels  # type: ignore[attr-defined]

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
