"""Rotary position embedding: apply, and its exact inverse for position-free storage.

Keys are stored without rotation so a cached chunk can be replayed at a new
absolute position; the rotation is re-applied inside attention. Each head
slice of width ``d_head`` is rotated pairwise: component ``j`` of the first
half pairs with component ``j`` of the second half, at angle
``position * base**(-2j/d_head)``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DEFAULT_BASE = 10000.0


def _rotate(vectors, positions, base, d_head, sign):
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {v.shape}")
    n, width = v.shape
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (n,):
        raise ShapeError(f"positions length {pos.shape} does not match {n} rows")
    if d_head is None:
        d_head = width
    if d_head <= 0 or d_head % 2 != 0:
        raise ShapeError(f"head width must be a positive even number, got {d_head}")
    if width % d_head != 0:
        raise ShapeError(f"row width {width} is not a multiple of head width {d_head}")

    half = d_head // 2
    freqs = base ** (-2.0 * np.arange(half) / d_head)
    theta = sign * pos[:, None] * freqs[None, :]  # [n, half]
    cos, sin = np.cos(theta), np.sin(theta)

    out = v.reshape(n, width // d_head, 2, half)
    x, y = out[:, :, 0, :], out[:, :, 1, :]
    rot = np.empty_like(out)
    rot[:, :, 0, :] = x * cos[:, None, :] - y * sin[:, None, :]
    rot[:, :, 1, :] = x * sin[:, None, :] + y * cos[:, None, :]
    return rot.reshape(n, width)


def apply_rpe(vectors, positions, base=DEFAULT_BASE, d_head=None):
    """Rotate each row by its position-dependent angles. Pure function.

    ``vectors`` is [n, d]; ``d`` must be a multiple of ``d_head`` (every head
    slice receives the same rotation). ``d_head=None`` treats the whole row
    as one slice.
    """
    return _rotate(vectors, positions, base, d_head, sign=1.0)


def remove_rpe(vectors, positions, base=DEFAULT_BASE, d_head=None):
    """Inverse of :func:`apply_rpe` at the same positions."""
    return _rotate(vectors, positions, base, d_head, sign=-1.0)
