"""Sliding-window attention: dense oracle, streaming cache, gradients."""

import math

import numpy as np
import pytest

from yoco import tensor as T
from yoco.swa import (
    SwaWeights,
    WindowCache,
    empty_window_cache,
    swa_decode_step,
    swa_forward,
    swa_step,
    window_mask,
)
from yoco.tensor import ShapeError, Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


def make_weights(r, d_model, n_heads, n_kv_heads, d_head, dtype=np.float64):
    std = d_model ** -0.5

    def w(shape):
        return Tensor((r.standard_normal(shape) * std).astype(dtype))

    return SwaWeights(w_q=w((d_model, n_heads * d_head)),
                      w_k=w((d_model, n_kv_heads * d_head)),
                      w_v=w((d_model, n_kv_heads * d_head)),
                      w_out=w((n_heads * d_head, d_model)))


def rotate_oracle(rows, d_head, theta, start_pos):
    """Independent pairwise rotation, looped per position and pair."""
    out = rows.astype(np.float64).copy()
    n, width = rows.shape
    for i in range(n):
        p = start_pos + i
        for base in range(0, width, d_head):
            for j in range(0, d_head, 2):
                ang = p * theta ** (-j / d_head)
                c, s = math.cos(ang), math.sin(ang)
                a, b = out[i, base + j], out[i, base + j + 1]
                out[i, base + j] = a * c - b * s
                out[i, base + j + 1] = a * s + b * c
    return out


def dense_oracle(x, weights, n_heads, n_kv_heads, d_head, window, rope_theta=None):
    """Reference windowed attention: per-query loops and explicit softmax."""
    xd = x.data.astype(np.float64)
    q = xd @ weights.w_q.data
    k = xd @ weights.w_k.data
    v = xd @ weights.w_v.data
    if rope_theta is not None:
        q = rotate_oracle(q, d_head, rope_theta, 0)
        k = rotate_oracle(k, d_head, rope_theta, 0)
    n = xd.shape[0]
    group = n_heads // n_kv_heads
    merged = np.zeros((n, n_heads * d_head))
    for i in range(n):
        lo = max(0, i - window + 1)
        for h in range(n_heads):
            g = h // group
            qi = q[i, h * d_head:(h + 1) * d_head] / math.sqrt(d_head)
            scores = np.array([
                qi @ k[j, g * d_head:(g + 1) * d_head] for j in range(lo, i + 1)])
            e = np.exp(scores - scores.max())
            p = e / e.sum()
            acc = np.zeros(d_head)
            for t, j in enumerate(range(lo, i + 1)):
                acc += p[t] * v[j, g * d_head:(g + 1) * d_head]
            merged[i, h * d_head:(h + 1) * d_head] = acc
    return merged @ weights.w_out.data


def run_stream(x, weights, n_heads, n_kv_heads, d_head, window, rope_theta=None):
    cache = empty_window_cache(window, n_kv_heads * d_head, dtype=x.dtype)
    rows = []
    for i in range(x.shape[0]):
        row, cache = swa_step(T.slice_rows(x, i, i + 1), weights, n_heads,
                              n_kv_heads, d_head, cache, rope_theta=rope_theta)
        rows.append(row.data)
    return np.concatenate(rows, axis=0), cache


class TestWindowMask:
    def test_self_and_recent_past_only(self):
        m = window_mask(np.arange(5), np.arange(5), window=3).data
        want_allowed = np.array([
            [1, 0, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [0, 1, 1, 1, 0],
            [0, 0, 1, 1, 1]], dtype=bool)
        np.testing.assert_array_equal(m == 0.0, want_allowed)

    def test_window_one_is_identity(self):
        m = window_mask(np.arange(4), np.arange(4), window=1).data
        np.testing.assert_array_equal(m == 0.0, np.eye(4, dtype=bool))

    def test_rejects_bad_window(self):
        with pytest.raises(ValueError):
            window_mask(np.arange(2), np.arange(2), window=0)


class TestAgainstDenseOracle:
    @pytest.mark.parametrize("window", [1, 2, 4, 16])
    def test_windowed_matches_oracle(self, window):
        r = rng(20 + window)
        n_heads, n_kv_heads, d_head, n = 4, 2, 4, 12
        weights = make_weights(r, 16, n_heads, n_kv_heads, d_head)
        x = Tensor(r.standard_normal((n, 16)))
        got, _ = swa_forward(x, weights, n_heads, n_kv_heads, d_head, window)
        want = dense_oracle(x, weights, n_heads, n_kv_heads, d_head, window)
        assert np.abs(got.data - want).max() <= 1e-10

    @pytest.mark.parametrize("window", [12, 100])
    def test_wide_window_is_full_causal_attention(self, window):
        # window >= n leaves nothing to evict: plain causal attention.
        r = rng(30)
        n_heads, n_kv_heads, d_head, n = 2, 1, 4, 12
        weights = make_weights(r, 8, n_heads, n_kv_heads, d_head)
        x = Tensor(r.standard_normal((n, 8)))
        got, _ = swa_forward(x, weights, n_heads, n_kv_heads, d_head, window,
                             rope_theta=10000.0)
        want = dense_oracle(x, weights, n_heads, n_kv_heads, d_head, n,
                            rope_theta=10000.0)
        assert np.abs(got.data - want).max() <= 1e-10

    def test_rope_positions_match_oracle(self):
        r = rng(31)
        weights = make_weights(r, 8, 2, 2, 4)
        x = Tensor(r.standard_normal((10, 8)))
        got, _ = swa_forward(x, weights, 2, 2, 4, 4, rope_theta=10000.0)
        want = dense_oracle(x, weights, 2, 2, 4, 4, rope_theta=10000.0)
        assert np.abs(got.data - want).max() <= 1e-10


class TestStreaming:
    @pytest.mark.parametrize("window", [1, 4, 8, 64])
    def test_stepwise_equals_block(self, window):
        r = rng(40 + window)
        n_heads, n_kv_heads, d_head, n = 2, 1, 4, 40
        weights = make_weights(r, 8, n_heads, n_kv_heads, d_head)
        x = Tensor(r.standard_normal((n, 8)))
        block, block_cache = swa_forward(x, weights, n_heads, n_kv_heads, d_head,
                                         window, rope_theta=10000.0)
        stream, stream_cache = run_stream(x, weights, n_heads, n_kv_heads, d_head,
                                          window, rope_theta=10000.0)
        assert np.abs(block.data - stream).max() <= 1e-10
        assert np.abs(block_cache.keys.data - stream_cache.keys.data).max() <= 1e-12
        assert block_cache.position == stream_cache.position == n

    def test_chunked_prefill_equals_one_shot(self):
        r = rng(50)
        n_heads, n_kv_heads, d_head, n, window = 2, 2, 4, 23, 6
        weights = make_weights(r, 8, n_heads, n_kv_heads, d_head)
        x = Tensor(r.standard_normal((n, 8)))
        full, full_cache = swa_forward(x, weights, n_heads, n_kv_heads, d_head,
                                       window, rope_theta=10000.0)
        cache = None
        pieces = []
        for cs in range(0, n, 5):
            ce = min(cs + 5, n)
            piece, cache = swa_forward(T.slice_rows(x, cs, ce), weights, n_heads,
                                       n_kv_heads, d_head, window, start_pos=cs,
                                       cache=cache, rope_theta=10000.0)
            pieces.append(piece.data)
        got = np.concatenate(pieces, axis=0)
        assert np.abs(got - full.data).max() <= 1e-12
        assert np.abs(cache.keys.data - full_cache.keys.data).max() <= 1e-12

    def test_gapless_stream_enforced(self):
        r = rng(51)
        weights = make_weights(r, 8, 2, 1, 4)
        x = Tensor(r.standard_normal((4, 8)))
        _, cache = swa_forward(x, weights, 2, 1, 4, 8)
        with pytest.raises(ValueError):
            swa_forward(x, weights, 2, 1, 4, 8, start_pos=9, cache=cache)


class TestCacheContents:
    @pytest.mark.parametrize("n,window", [(3, 8), (8, 8), (20, 8), (5, 1)])
    def test_cache_holds_exactly_last_min_n_window_rows(self, n, window):
        r = rng(60 + n)
        n_heads, n_kv_heads, d_head = 2, 1, 4
        weights = make_weights(r, 8, n_heads, n_kv_heads, d_head)
        x = Tensor(r.standard_normal((n, 8)))
        _, cache = swa_forward(x, weights, n_heads, n_kv_heads, d_head, window,
                               rope_theta=10000.0)
        m = min(n, window)
        assert cache.length == m
        assert cache.position == n
        assert cache.value_count == 2 * m * n_kv_heads * d_head
        # Rows are the last m projected, rotated keys in order.
        k = rotate_oracle(x.data @ weights.w_k.data, d_head, 10000.0, 0)
        np.testing.assert_allclose(cache.keys.data, k[n - m:], atol=1e-12)

    def test_window_one_attends_only_itself(self):
        r = rng(61)
        d_head = 4
        cache = empty_window_cache(1, d_head, dtype=np.float64)
        out_rows = []
        vs = []
        for i in range(5):
            q = Tensor(r.standard_normal((1, d_head)))
            k = Tensor(r.standard_normal((1, d_head)))
            v = Tensor(r.standard_normal((1, d_head)))
            out, cache = swa_decode_step(q, k, v, cache, n_heads=1, d_head=d_head)
            out_rows.append(out.data)
            vs.append(v.data)
        # Sole allowed position means probability one on the current value.
        np.testing.assert_allclose(np.concatenate(out_rows), np.concatenate(vs),
                                   rtol=1e-14)

    def test_capacity_validation(self):
        with pytest.raises(ValueError):
            empty_window_cache(0, 4)
        with pytest.raises(ShapeError):
            WindowCache(T.zeros((3, 2)), T.zeros((3, 2)), capacity=2, position=5)


class TestCausalityAndPrecision:
    def test_future_edit_leaves_prefix_bit_identical(self):
        r = rng(70)
        weights = make_weights(r, 8, 2, 1, 4)
        x = r.standard_normal((10, 8))
        x2 = x.copy()
        x2[7:] += 5.0
        a, _ = swa_forward(Tensor(x), weights, 2, 1, 4, 4, rope_theta=10000.0)
        b, _ = swa_forward(Tensor(x2), weights, 2, 1, 4, 4, rope_theta=10000.0)
        assert np.array_equal(a.data[:7], b.data[:7])

    def test_float32_parity(self):
        r = rng(71)
        weights64 = make_weights(r, 8, 2, 1, 4)
        weights32 = SwaWeights(*(w.astype(np.float32) for w in
                                 (weights64.w_q, weights64.w_k, weights64.w_v,
                                  weights64.w_out)))
        x = r.standard_normal((12, 8))
        got64, _ = swa_forward(Tensor(x), weights64, 2, 1, 4, 4, rope_theta=10000.0)
        got32, _ = swa_forward(Tensor(x.astype(np.float32)), weights32, 2, 1, 4, 4,
                               rope_theta=10000.0)
        assert got32.data.dtype == np.float32
        # Scale-relative: per-element ratios blow up on near-zero outputs.
        rel = np.abs(got32.data - got64.data).max() / np.abs(got64.data).max()
        assert rel <= 1e-6


class TestGradients:
    def test_finite_difference_through_block(self):
        r = rng(80)
        n_heads, n_kv_heads, d_head, n, window = 2, 1, 4, 5, 3
        weights = make_weights(r, 8, n_heads, n_kv_heads, d_head)
        x = Tensor(r.standard_normal((n, 8)))
        wsum = Tensor(r.standard_normal((n, 8)))
        names = ["w_q", "w_k", "w_v", "w_out"]

        def f(p):
            wts = SwaWeights(**dict(zip(names, p[1:])))
            y, _ = swa_forward(p[0], wts, n_heads, n_kv_heads, d_head, window,
                               rope_theta=10000.0)
            return T.sum_all(T.mul(y, wsum))

        points = [x] + [getattr(weights, nm) for nm in names]
        assert grad_check(f, points) < 1e-4
