"""Sliding-window attention with a bounded decode cache.

Each query position attends itself and the window - 1 positions before
it, under softmax attention with grouped key/value heads (query head h
reads kv head h // (n_heads // n_kv_heads)). During decoding, keys and
values live in a fixed-capacity window cache that keeps exactly the
last min(position, window) rows, so memory never grows with sequence
length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rope import rope_apply_heads
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class SwaWeights:
    """Projections for one sliding-window attention block."""

    w_q: Tensor    # [d_model, n_heads * d_head]
    w_k: Tensor    # [d_model, n_kv_heads * d_head]
    w_v: Tensor    # [d_model, n_kv_heads * d_head]
    w_out: Tensor  # [n_heads * d_head, d_model]


@dataclass(frozen=True)
class WindowCache:
    """Ring of the most recent key/value rows, oldest first.

    keys and values are [m, d_kv] with m <= capacity; position is the
    absolute index of the next row to append. Rows carry keys already
    position-rotated, so they are reusable as-is. The cache is a
    single-owner value: appending returns a new cache.
    """

    keys: Tensor
    values: Tensor
    capacity: int
    position: int

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"window capacity must be >= 1, got {self.capacity}")
        if self.keys.shape != self.values.shape:
            raise ShapeError(
                f"key/value shapes {self.keys.shape} and {self.values.shape} differ")
        if self.keys.shape[0] > self.capacity:
            raise ShapeError(
                f"cache holds {self.keys.shape[0]} rows, above capacity {self.capacity}")
        if self.keys.shape[0] > self.position:
            raise ValueError("cache cannot hold more rows than positions seen")

    @property
    def length(self) -> int:
        return self.keys.shape[0]

    @property
    def value_count(self) -> int:
        """Live scalar count: keys plus values actually stored."""
        return 2 * self.keys.size


def empty_window_cache(capacity: int, d_kv: int, dtype=np.float64) -> WindowCache:
    return WindowCache(T.zeros((0, d_kv), dtype=dtype),
                       T.zeros((0, d_kv), dtype=dtype), capacity, 0)


def window_mask(q_positions: np.ndarray, k_positions: np.ndarray, window: int,
                dtype=np.float64) -> Tensor:
    """Additive mask allowing key j for query i iff 0 <= qpos_i - kpos_j < window."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    diff = q_positions[:, None] - k_positions[None, :]
    allowed = (diff >= 0) & (diff < window)
    return Tensor._wrap(np.where(allowed, 0.0, -np.inf).astype(dtype))


def _append_rows(cache: WindowCache, k_new: Tensor, v_new: Tensor,
                 n_new: int) -> WindowCache:
    k_all = T.concat_rows([cache.keys, k_new]) if cache.length else k_new
    v_all = T.concat_rows([cache.values, v_new]) if cache.length else v_new
    keep = min(cache.capacity, k_all.shape[0])
    start = k_all.shape[0] - keep
    return WindowCache(T.slice_rows(k_all, start, k_all.shape[0]),
                       T.slice_rows(v_all, start, v_all.shape[0]),
                       cache.capacity, cache.position + n_new)


def grouped_attention(q: Tensor, k_all: Tensor, v_all: Tensor, mask: Tensor,
                      n_heads: int, n_kv_heads: int, d_head: int) -> Tensor:
    """Masked softmax attention with query head h reading kv head h // group.

    q is [n, n_heads * d_head] unscaled; scaling by d_head^-1/2 happens
    here. Returns the concatenated head outputs without any output
    projection.
    """
    if n_heads % n_kv_heads != 0:
        raise ShapeError(f"{n_heads} query heads not divisible by {n_kv_heads} kv heads")
    group = n_heads // n_kv_heads
    inv_scale = float(d_head) ** -0.5
    outs = []
    for h in range(n_heads):
        g = h // group
        qh = T.scale(T.slice_cols(q, h * d_head, (h + 1) * d_head), inv_scale)
        kg = T.slice_cols(k_all, g * d_head, (g + 1) * d_head)
        vg = T.slice_cols(v_all, g * d_head, (g + 1) * d_head)
        probs = T.softmax_masked(T.matmul(qh, T.transpose(kg)), mask)
        outs.append(T.matmul(probs, vg))
    return T.concat_cols(outs)


def swa_forward(x: Tensor, weights: SwaWeights, n_heads: int, n_kv_heads: int,
                d_head: int, window: int, *, start_pos: int = 0,
                cache: WindowCache | None = None,
                rope_theta: float | None = None) -> tuple[Tensor, WindowCache]:
    """Windowed attention over a block of rows, continuing a cache if given.

    Row i of x sits at absolute position start_pos + i; when a cache is
    supplied its position must equal start_pos so the stream is gapless.
    Returns the block output (after the output projection) and the cache
    advanced past this block. Feeding one block or many smaller ones
    produces the same outputs, which is what makes chunked prefill exact.
    """
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D input, got shape {x.shape}")
    if cache is not None and cache.position != start_pos:
        raise ValueError(
            f"cache is at position {cache.position} but block starts at {start_pos}")
    n = x.shape[0]
    q = T.matmul(x, weights.w_q)
    k = T.matmul(x, weights.w_k)
    v = T.matmul(x, weights.w_v)
    if rope_theta is not None:
        q = rope_apply_heads(q, n_heads, d_head, rope_theta, start_pos)
        k = rope_apply_heads(k, n_kv_heads, d_head, rope_theta, start_pos)

    if cache is not None and cache.length:
        k_all = T.concat_rows([cache.keys, k])
        v_all = T.concat_rows([cache.values, v])
        k_positions = np.arange(cache.position - cache.length, cache.position + n)
    else:
        k_all, v_all = k, v
        k_positions = np.arange(start_pos, start_pos + n)
    q_positions = np.arange(start_pos, start_pos + n)
    mask = window_mask(q_positions, k_positions, window, dtype=x.dtype)

    merged = grouped_attention(q, k_all, v_all, mask, n_heads, n_kv_heads, d_head)
    out = T.matmul(merged, weights.w_out)
    T.ensure_finite(out, "windowed attention output")

    base = cache if cache is not None else empty_window_cache(
        window, n_kv_heads * d_head, dtype=x.dtype)
    return out, _append_rows(base, k, v, n)


def swa_decode_step(q_row: Tensor, k_row: Tensor, v_row: Tensor, cache: WindowCache,
                    n_heads: int, d_head: int) -> tuple[Tensor, WindowCache]:
    """One decode position against the window cache.

    q_row is [1, n_heads * d_head], already scaled and position-rotated;
    k_row/v_row are [1, n_kv_heads * d_head] likewise. The new row enters
    the cache first (evicting the oldest row at capacity), then the query
    attends every cached row; by construction those are exactly the last
    min(position + 1, capacity) positions, all inside the window.
    """
    if q_row.shape[0] != 1 or k_row.shape[0] != 1 or v_row.shape[0] != 1:
        raise ShapeError("decode step takes single rows")
    if q_row.shape[1] != n_heads * d_head:
        raise ShapeError(f"query width {q_row.shape[1]} != {n_heads} heads of {d_head}")
    if k_row.shape[1] % d_head != 0:
        raise ShapeError(f"key width {k_row.shape[1]} not a multiple of {d_head}")
    n_kv_heads = k_row.shape[1] // d_head
    new_cache = _append_rows(cache, k_row, v_row, 1)
    zero_mask = T.zeros((1, new_cache.length), dtype=q_row.dtype)
    group = n_heads // n_kv_heads
    outs = []
    for h in range(n_heads):
        g = h // group
        qh = T.slice_cols(q_row, h * d_head, (h + 1) * d_head)
        kg = T.slice_cols(new_cache.keys, g * d_head, (g + 1) * d_head)
        vg = T.slice_cols(new_cache.values, g * d_head, (g + 1) * d_head)
        probs = T.softmax_masked(T.matmul(qh, T.transpose(kg)), zero_mask)
        outs.append(T.matmul(probs, vg))
    merged = T.concat_cols(outs)
    T.ensure_finite(merged, "windowed attention decode output")
    return merged, new_cache


def swa_step(x_row: Tensor, weights: SwaWeights, n_heads: int, n_kv_heads: int,
             d_head: int, cache: WindowCache, *,
             rope_theta: float | None = None) -> tuple[Tensor, WindowCache]:
    """Project, rotate, and decode one row at the cache's current position."""
    if x_row.shape[0] != 1:
        raise ShapeError(f"swa_step takes a single row, got {x_row.shape[0]}")
    pos = cache.position
    q = T.matmul(x_row, weights.w_q)
    k = T.matmul(x_row, weights.w_k)
    v = T.matmul(x_row, weights.w_v)
    if rope_theta is not None:
        q = rope_apply_heads(q, n_heads, d_head, rope_theta, pos)
        k = rope_apply_heads(k, n_kv_heads, d_head, rope_theta, pos)
    q = T.scale(q, float(d_head) ** -0.5)
    merged, new_cache = swa_decode_step(q, k, v, cache, n_heads, d_head)
    return T.matmul(merged, weights.w_out), new_cache
