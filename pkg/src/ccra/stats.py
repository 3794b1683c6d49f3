"""Small shared statistics helpers."""

from __future__ import annotations

import numpy as np


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054):
    """Wilson score interval; returns (rate, lo, hi)."""
    if n == 0:
        return 0.0, 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return p, max(0.0, center - half), min(1.0, center + half)
