"""Lossless decimal formatting shared by all CSV writers."""

from __future__ import annotations

import numbers


def fmt(value) -> str:
    """Shortest round-trip decimal for floats (at most 17 significant digits).

    Negative zero is written as ``0.0``.
    """
    if isinstance(value, (bool,)) or value is None:
        return str(value)
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        return repr(float(value) + 0.0)
    return str(value)
