"""Runnable invariant suites.

Each suite re-checks one load-bearing equivalence of the architecture on
small randomized instances and reports a pass/fail result with the
measured error. The CLI drives these; the test suite covers the same
ground more exhaustively. All comparisons run at a tolerance chosen by
dtype: 1e-10 in float64, 1e-4 in float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .engine import cost_report, decode_step, prefill
from .gret import (
    DecaySchedule,
    GretWeights,
    gret_chunkwise,
    initial_gate_state,
    mhgr_forward,
)
from .model import forward_full, init_params
from .parsim import comm_stats, plan_chunks, simulate_forward
from .swa import SwaWeights, swa_forward, swa_step, empty_window_cache, grouped_attention
from .tensor import Tensor, grad_check

__all__ = ["SuiteResult", "run_verification", "PARADIGM_CHOICES"]

PARADIGM_CHOICES = ("parallel", "recurrent", "chunkwise")


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _diff_result(name: str, diff: float, tol: float) -> SuiteResult:
    sign = "<=" if diff <= tol else ">"
    return SuiteResult(name, diff <= tol, f"max |diff| {diff:.3e} {sign} {tol:.0e}")


def _mhgr(x, weights, paradigm):
    out, _ = mhgr_forward(x, weights, 2, 8, paradigm=paradigm, chunk=5,
                          tau=16.0, rope_theta=10000.0)
    return out.data


def _retention_suite(dtype, tol, paradigms) -> list[SuiteResult]:
    rng = np.random.default_rng(11)
    d = 16
    x = Tensor(rng.standard_normal((24, d)).astype(dtype))
    weights = GretWeights(*(
        Tensor((rng.standard_normal((d, cols)) * d ** -0.5).astype(dtype))
        for cols in (d, d, d, 2, d, d)))
    selected = [p for p in PARADIGM_CHOICES if p in paradigms]
    outputs = {p: _mhgr(x, weights, p) for p in selected}
    results = []
    if len(selected) == 1:
        p = selected[0]
        finite = bool(np.isfinite(outputs[p]).all())
        results.append(SuiteResult(f"retention-{p}-finite", finite,
                                   "all outputs finite" if finite
                                   else "non-finite outputs"))
        return results
    for i, p in enumerate(selected):
        for q in selected[i + 1:]:
            diff = float(np.abs(outputs[p] - outputs[q]).max())
            results.append(_diff_result(f"retention-{p}-vs-{q}", diff, tol))
    return results


def _window_suite(dtype, tol) -> list[SuiteResult]:
    rng = np.random.default_rng(12)
    n, d = 20, 16
    x = Tensor(rng.standard_normal((n, d)).astype(dtype))
    weights = SwaWeights(*(
        Tensor((rng.standard_normal((d, cols)) * d ** -0.5).astype(dtype))
        for cols in (d, 8, 8, d)))
    wide, _ = swa_forward(x, weights, 2, 1, 8, window=n + 5, rope_theta=10000.0)

    # dense causal reference through the same attention core
    q = T.matmul(x, weights.w_q)
    k = T.matmul(x, weights.w_k)
    v = T.matmul(x, weights.w_v)
    from .rope import rope_apply_heads
    q = rope_apply_heads(q, 2, 8, 10000.0, 0)
    k = rope_apply_heads(k, 1, 8, 10000.0, 0)
    dense = T.matmul(grouped_attention(q, k, v, T.causal_mask(n, dtype=dtype),
                                       2, 1, 8), weights.w_out)
    diff_causal = float(np.abs(wide.data - dense.data).max())

    narrow, _ = swa_forward(x, weights, 2, 1, 8, window=4, rope_theta=10000.0)
    cache = empty_window_cache(4, 8, dtype=dtype)
    rows = []
    for i in range(n):
        row, cache = swa_step(T.slice_rows(x, i, i + 1), weights, 2, 1, 8, cache,
                              rope_theta=10000.0)
        rows.append(row.data)
    diff_stream = float(np.abs(np.concatenate(rows) - narrow.data).max())
    return [_diff_result("window-reduces-to-causal", diff_causal, tol),
            _diff_result("window-streaming-vs-block", diff_stream, tol)]


def _engine_suite(config: ModelConfig, seed: int, dtype, tol) -> list[SuiteResult]:
    params = init_params(config, seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1)
    tokens = [int(t) for t in rng.integers(0, config.vocab_size, size=32)]
    full = forward_full(tokens, params, config)
    state, logits = prefill(tokens[:24], params, config)
    diff_prefill = float(np.abs(logits.data[0] - full.data[23]).max())
    results = [_diff_result("prefill-early-exit", diff_prefill, tol)]

    work_ok = state.layer_tokens_cross == config.n_cross_layers
    results.append(SuiteResult(
        "prefill-cross-work", work_ok,
        f"cross layer-tokens {state.layer_tokens_cross}, want "
        f"{config.n_cross_layers}"))

    diff_decode = 0.0
    for i in range(24, 32):
        logits, state = decode_step(state, tokens[i])
        diff_decode = max(diff_decode,
                          float(np.abs(logits.data[0] - full.data[i]).max()))
    results.append(_diff_result("decode-consistency", diff_decode, tol))

    counted = state.cache_value_count
    formula = cost_report(config, 32).total_values_yoco
    results.append(SuiteResult(
        "cache-accounting", counted == formula,
        f"live count {counted}, formula {formula}"))
    return results


def _parsim_suite(config: ModelConfig, seed: int, dtype, tol) -> list[SuiteResult]:
    params = init_params(config, seed, dtype=dtype)
    rng = np.random.default_rng(seed + 2)
    tokens = [int(t) for t in rng.integers(0, config.vocab_size, size=24)]
    want = forward_full(tokens, params, config)
    worst = 0.0
    structure_ok = True
    detail = []
    for devices in (1, 2, 3):
        logits, trace = simulate_forward(plan_chunks(24, devices), params,
                                         config, tokens)
        worst = max(worst, float(np.abs(logits.data - want.data).max()))
        stats = comm_stats(trace)
        expected_handoffs = config.n_self_layers * (devices - 1)
        if (stats["allgather_count"] != 1
                or stats["handoff_count"] != expected_handoffs):
            structure_ok = False
            detail.append(f"P={devices}: {stats}")
    return [
        _diff_result("chunk-parallel-equivalence", worst, tol),
        SuiteResult("chunk-parallel-structure", structure_ok,
                    "one all-gather, adjacent handoffs" if structure_ok
                    else "; ".join(detail)),
    ]


def _gradient_suite() -> list[SuiteResult]:
    rng = np.random.default_rng(13)
    n, d = 8, 4
    q = Tensor(rng.standard_normal((n, d)) * d ** -0.5)
    k = Tensor(rng.standard_normal((n, d)))
    v = Tensor(rng.standard_normal((n, d)))
    gamma = 1.0 - 10.0 ** rng.uniform(-3.0, -0.8, size=(1, n))
    w_out = Tensor(rng.standard_normal((n, d)))
    w_state = Tensor(rng.standard_normal((d, d)))

    def loss(pts):
        sched = DecaySchedule.from_gamma(Tensor(gamma), tau=16.0)
        out, st = gret_chunkwise(pts[0], pts[1], pts[2], sched,
                                 initial_gate_state(d))
        return T.add(T.sum_all(T.mul(out, w_out)), T.sum_all(T.mul(st.s, w_state)))

    err = grad_check(loss, [q, k, v])
    return [SuiteResult("chunkwise-gradients", err < 1e-4,
                        f"max rel err {err:.3e} vs 1e-04")]


def run_verification(config: ModelConfig, *, seed: int = 0, dtype=np.float64,
                     paradigms: tuple[str, ...] | None = None) -> list[SuiteResult]:
    """Run every suite; paradigm filtering narrows the retention comparisons."""
    selected = tuple(paradigms) if paradigms else PARADIGM_CHOICES
    unknown = [p for p in selected if p not in PARADIGM_CHOICES]
    if unknown:
        raise ValueError(f"unknown paradigms {unknown}, expected subset of "
                         f"{PARADIGM_CHOICES}")
    tol = 1e-10 if np.dtype(dtype) == np.float64 else 1e-4
    results = []
    results += _retention_suite(dtype, tol, selected)
    results += _window_suite(dtype, tol)
    results += _engine_suite(config, seed, dtype, tol)
    results += _parsim_suite(config, seed, dtype, tol)
    results += _gradient_suite()
    return results
