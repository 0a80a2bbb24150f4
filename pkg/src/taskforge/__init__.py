"""Task-vector composition, merge strategies and weight-space analytics."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: E402
