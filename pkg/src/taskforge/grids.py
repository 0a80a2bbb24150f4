"""Parsing of ``start:stop:step`` grids and comma lists."""

from __future__ import annotations

from fractions import Fraction


def _frac(text: str) -> Fraction:
    return Fraction(text.strip())


def parse_grid(text: str) -> list[float]:
    """``"0:1:0.1"`` -> 11 points, stop inclusive; ``"0.5,0.9"`` -> those values.

    Ranges are stepped in exact decimal arithmetic, so ``0.1:1.0:0.1`` has
    exactly ten points and each equals its decimal literal.
    """
    text = text.strip()
    if ":" not in text:
        return [float(v) for v in text.split(",") if v.strip()]
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must be start:stop:step, got {text!r}")
    start, stop, step = (_frac(p) for p in parts)
    if step <= 0:
        raise ValueError("grid step must be positive")
    if stop < start:
        raise ValueError("grid stop must not be below start")
    n = int((stop - start) / step)
    return [float(start + i * step) for i in range(n + 1)]


def parse_assignment(text: str) -> tuple[str, list[float]]:
    """``"lambda=0.1:1.0:0.1"`` -> ``("lambda", [...])``."""
    name, sep, grid = text.partition("=")
    if not sep:
        raise ValueError(f"expected name=grid, got {text!r}")
    return name.strip(), parse_grid(grid)
