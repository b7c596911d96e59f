"""Inference runtime.

Prefill runs the self-decoder chunkwise over the whole prompt, fills the
single shared key/value cache for every position, then runs the
cross-decoder for the last position only, so prompt cost in the second
half of the stack is one query regardless of prompt length. Decode steps
the self-decoder recurrently, appends one cache row, and cross-decodes
the one new query.

The module also carries the analytic cost model: cache sizes, attention
FLOP counts, and layer-token work, for this architecture and for a
standard transformer baseline whose every layer keeps its own cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .gret import GateState
from .model import (
    Params,
    cross_decoder_forward,
    kv_project,
    self_decoder_forward,
    validate_tokens,
)
from .swa import WindowCache
from .tensor import ShapeError, Tensor

__all__ = [
    "GlobalKVCache", "EngineState", "CostReport",
    "prefill", "decode_step", "generate",
    "cost_report", "tokens_supported",
    "attn_flops_prefill", "attn_flops_transformer_prefill",
]


class GlobalKVCache:
    """Append-only store for the shared key/value rows, grown by doubling.

    Rows are never rewritten once appended; readers get slice views of the
    live region, which later appends do not touch. Only live entries count
    as values, capacity is an implementation detail.
    """

    def __init__(self, d_kv: int, dtype=np.float64, initial_capacity: int = 64):
        if d_kv < 1 or initial_capacity < 1:
            raise ValueError("d_kv and initial_capacity must be positive")
        self._k = np.empty((initial_capacity, d_kv), dtype=dtype)
        self._v = np.empty((initial_capacity, d_kv), dtype=dtype)
        self._n = 0

    @property
    def length(self) -> int:
        return self._n

    @property
    def capacity(self) -> int:
        return self._k.shape[0]

    @property
    def d_kv(self) -> int:
        return self._k.shape[1]

    @property
    def value_count(self) -> int:
        """Live key and value scalars held right now."""
        return 2 * self._n * self.d_kv

    def keys(self) -> Tensor:
        return Tensor._wrap(self._k[:self._n])

    def values(self) -> Tensor:
        return Tensor._wrap(self._v[:self._n])

    def append(self, k_rows: Tensor, v_rows: Tensor) -> None:
        if k_rows.shape != v_rows.shape or k_rows.shape[1] != self.d_kv:
            raise ShapeError(
                f"cache append: got {k_rows.shape} and {v_rows.shape}, "
                f"want matching [m, {self.d_kv}]")
        m = k_rows.shape[0]
        needed = self._n + m
        if needed > self.capacity:
            new_cap = self.capacity
            while new_cap < needed:
                new_cap *= 2
            k_new = np.empty((new_cap, self.d_kv), dtype=self._k.dtype)
            v_new = np.empty((new_cap, self.d_kv), dtype=self._v.dtype)
            k_new[:self._n] = self._k[:self._n]
            v_new[:self._n] = self._v[:self._n]
            self._k, self._v = k_new, v_new
        self._k[self._n:needed] = k_rows.data
        self._v[self._n:needed] = v_rows.data
        self._n = needed


def _state_value_count(state) -> int:
    """Scalars held by one self-decoder layer's carried state."""
    if state is None:
        return 0
    if isinstance(state, WindowCache):
        return state.value_count
    if isinstance(state, list):  # one GateState per head
        return sum(s.s.size for s in state)
    raise TypeError(f"unknown self-decoder state {type(state).__name__}")


@dataclass
class EngineState:
    """Everything one sequence needs to keep decoding. Single-owner."""

    config: ModelConfig
    params: Params
    position: int
    self_states: list
    cache: GlobalKVCache
    layer_tokens_self: int = 0
    layer_tokens_cross: int = 0

    @property
    def cache_value_count(self) -> int:
        """Live cached scalars: shared cache plus per-layer constant state."""
        return self.cache.value_count + sum(
            _state_value_count(s) for s in self.self_states)


def _logits_for(y: Tensor, params: Params, config: ModelConfig) -> Tensor:
    h = T.rmsnorm(y, params.final_norm, config.rmsnorm_eps)
    if params.classifier is not None:
        logits = T.matmul(h, params.classifier)
    else:
        logits = T.matmul(h, T.transpose(params.embed))
    return T.ensure_finite(logits, "logits")


def prefill(tokens, params: Params, config: ModelConfig, *,
            chunk: int | None = None) -> tuple[EngineState, Tensor]:
    """Consume a prompt; return state plus logits for its last position.

    The self-decoder sees all n positions chunkwise; the cross-decoder
    sees exactly one query, so its prefill work is layers/2 layer-tokens
    however long the prompt is.
    """
    ids = validate_tokens(tokens, config)
    n = ids.size
    if n > config.max_seq_len:
        raise ValueError(f"prompt length {n} exceeds max_seq_len {config.max_seq_len}")
    x = T.take_rows(params.embed, ids)
    m, states = self_decoder_forward(x, params, config, mode="chunkwise", chunk=chunk)
    k_hat, v_hat = kv_project(m, params, config)
    cache = GlobalKVCache(config.d_kv, dtype=x.dtype,
                          initial_capacity=max(64, n))
    cache.append(k_hat, v_hat)
    last = T.slice_rows(m, n - 1, n)
    y = cross_decoder_forward(last, cache.keys(), cache.values(), params, config,
                              query_start=n - 1)
    logits = _logits_for(y, params, config)
    state = EngineState(
        config=config, params=params, position=n, self_states=states, cache=cache,
        layer_tokens_self=config.n_self_layers * n,
        layer_tokens_cross=config.n_cross_layers)
    return state, logits


def decode_step(state: EngineState, token: int) -> tuple[Tensor, EngineState]:
    """Advance one position: recurrent self step, one cache row, one query."""
    config, params = state.config, state.params
    if not isinstance(token, (int, np.integer)):
        raise ValueError(f"token must be an integer, got {type(token).__name__}")
    if not 0 <= token < config.vocab_size:
        raise ValueError(f"token id out of vocab: {token} vs vocab_size "
                         f"{config.vocab_size}")
    pos = state.position
    if pos + 1 > config.max_seq_len:
        raise ValueError(f"position {pos} would exceed max_seq_len "
                         f"{config.max_seq_len}")
    x = T.take_rows(params.embed, np.array([token]))
    m, new_states = self_decoder_forward(
        x, params, config, mode="step", states=state.self_states, start_pos=pos)
    k_row, v_row = kv_project(m, params, config, start_pos=pos)
    state.cache.append(k_row, v_row)
    y = cross_decoder_forward(m, state.cache.keys(), state.cache.values(),
                              params, config, query_start=pos)
    logits = _logits_for(y, params, config)
    state.position = pos + 1
    state.self_states = new_states
    state.layer_tokens_self += config.n_self_layers
    state.layer_tokens_cross += config.n_cross_layers
    return logits, state


def _greedy_pick(logits: Tensor) -> int:
    # argmax returns the first maximum, which is the lowest token id on ties
    return int(np.argmax(logits.data[-1]))


def generate(prompt, params: Params, config: ModelConfig, max_new: int, *,
             chunk: int | None = None) -> list[int]:
    """Greedy continuation of a prompt; returns only the new tokens."""
    if max_new < 0:
        raise ValueError(f"max_new must be nonnegative, got {max_new}")
    state, logits = prefill(prompt, params, config, chunk=chunk)
    out: list[int] = []
    for _ in range(max_new):
        token = _greedy_pick(logits)
        out.append(token)
        logits, state = decode_step(state, token)
    return out


# ---------------------------------------------------------------------------
# Analytic cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    """Exact cache/FLOP counts for a config at prompt length n.

    kv_values_* count scalars in key/value caches: this model keeps one
    n x d_kv cache pair for the whole stack, the transformer baseline
    keeps one pair per layer. state_values_yoco adds the self-decoder's
    n-independent carried state. FLOPs count score and value-aggregation
    multiply-accumulates times two; layers_prefilled counts layer-token
    executions during prefill.
    """

    n: int
    precision_bytes: int
    kv_values_yoco: int
    kv_values_transformer: int
    state_values_yoco: int
    attn_flops_yoco: int
    attn_flops_transformer: int
    layers_prefilled_yoco: int
    layers_prefilled_transformer: int

    @property
    def kv_bytes_yoco(self) -> int:
        return self.kv_values_yoco * self.precision_bytes

    @property
    def kv_bytes_transformer(self) -> int:
        return self.kv_values_transformer * self.precision_bytes

    @property
    def total_values_yoco(self) -> int:
        return self.kv_values_yoco + self.state_values_yoco


def _self_state_values(config: ModelConfig, n: int) -> int:
    """Carried self-decoder state scalars across all layers/2 layers."""
    if config.self_attn_kind == "gret":
        per_layer = config.n_heads * config.d_head * config.d_head
    else:
        per_layer = 2 * min(n, config.window) * config.d_kv
    return config.n_self_layers * per_layer


def attn_flops_prefill(config: ModelConfig, n: int, chunk: int | None = None) -> int:
    """Attention FLOPs to prefill n tokens: chunkwise self half plus a
    single-query cross half. Multiply-accumulates in scores and value
    aggregation, two FLOPs each."""
    block = chunk if chunk is not None else config.chunk
    d = config.d_model
    if config.self_attn_kind == "gret":
        per_layer = 0
        remaining = n
        while remaining > 0:
            b = min(block, remaining)
            per_layer += (4 * b * b + 4 * b * config.d_head) * d
            remaining -= b
    else:
        c = config.window
        if n <= c:
            visible = n * (n + 1) // 2
        else:
            visible = c * (c + 1) // 2 + (n - c) * c
        per_layer = 4 * visible * d
    cross_per_layer = 4 * n * d
    return config.n_self_layers * per_layer + config.n_cross_layers * cross_per_layer


def attn_flops_transformer_prefill(config: ModelConfig, n: int) -> int:
    """Baseline: every layer runs full causal attention over n positions."""
    return 4 * config.layers * n * n * config.d_model


def cost_report(config: ModelConfig, n: int, precision_bytes: int = 4, *,
                chunk: int | None = None) -> CostReport:
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if precision_bytes < 1:
        raise ValueError(f"precision_bytes must be positive, got {precision_bytes}")
    kv_yoco = 2 * n * config.d_kv
    return CostReport(
        n=n,
        precision_bytes=precision_bytes,
        kv_values_yoco=kv_yoco,
        kv_values_transformer=2 * n * config.d_kv * config.layers,
        state_values_yoco=_self_state_values(config, n),
        attn_flops_yoco=attn_flops_prefill(config, n, chunk),
        attn_flops_transformer=attn_flops_transformer_prefill(config, n),
        layers_prefilled_yoco=config.n_self_layers * n + config.n_cross_layers,
        layers_prefilled_transformer=config.layers * n,
    )


def tokens_supported(config: ModelConfig, budget_bytes: int,
                     precision_bytes: int, model: str) -> int:
    """How many cached tokens fit in a byte budget.

    Per-token cost is 2 d_kv scalars for this architecture's one shared
    cache (carried state is constant in n and excluded) versus
    2 d_kv layers for the baseline.
    """
    if model == "yoco":
        per_token = 2 * config.d_kv * precision_bytes
    elif model == "transformer":
        per_token = 2 * config.d_kv * config.layers * precision_bytes
    else:
        raise ValueError(f"unknown model {model!r}, expected yoco or transformer")
    return budget_bytes // per_token
