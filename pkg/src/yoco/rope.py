"""Rotary position encoding for attention queries and keys.

Each even/odd feature pair (2j, 2j+1) of a row at absolute position p is
rotated by the angle p * theta^(-2j/d). Dot products between rotated
queries and keys then depend on relative position only. Angles are
computed in float64 before casting to the operand dtype so that large
positions with large theta values stay accurate in float32 runs.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, _active_tape


def rotation_tables(n: int, d: int, theta: float, start_pos: int = 0,
                    dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [n, d/2] for rows at positions start_pos..start_pos+n-1."""
    if d % 2 != 0:
        raise ShapeError(f"rotary dimension must be even, got {d}")
    inv_freq = theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    pos = np.arange(start_pos, start_pos + n, dtype=np.float64)
    angles = pos[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply_heads(x: Tensor, heads: int, d_head: int, theta: float,
                     start_pos: int = 0) -> Tensor:
    """Rotate each head's d_head-wide column block of x independently."""
    if x.shape[1] != heads * d_head:
        raise ShapeError(
            f"rope_apply_heads: width {x.shape[1]} != {heads} heads of {d_head}")
    parts = [rope_apply(T.slice_cols(x, h * d_head, (h + 1) * d_head), theta, start_pos)
             for h in range(heads)]
    return T.concat_cols(parts)


def rope_apply(x: Tensor, theta: float, start_pos: int = 0) -> Tensor:
    """Rotate feature pairs of x by position-dependent angles.

    x is [n, d] with even d; row i sits at absolute position start_pos + i.
    The map is orthogonal per row, so norms are preserved and the backward
    pass is the inverse rotation.
    """
    if x.ndim != 2:
        raise ShapeError(f"rope_apply: expected 2-D input, got shape {x.shape}")
    n, d = x.shape
    if theta <= 0:
        raise ValueError(f"rope_apply: theta must be positive, got {theta}")
    if start_pos < 0:
        raise ValueError(f"rope_apply: start_pos must be nonnegative, got {start_pos}")
    cos, sin = rotation_tables(n, d, theta, start_pos, dtype=x.dtype)
    xd = x.data
    even, odd = xd[:, 0::2], xd[:, 1::2]
    res = np.empty_like(xd)
    res[:, 0::2] = even * cos - odd * sin
    res[:, 1::2] = even * sin + odd * cos
    out = Tensor._wrap(res)
    tape = _active_tape()
    if tape is not None:
        def backward(g):
            ge, go = g[:, 0::2], g[:, 1::2]
            gx = np.empty_like(g)
            gx[:, 0::2] = ge * cos + go * sin
            gx[:, 1::2] = -ge * sin + go * cos
            return (gx,)
        tape.record(out, (x,), backward)
    return out
