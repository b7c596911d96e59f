"""Chunk-parallelism simulator.

Splits a sequence across P virtual devices holding contiguous token
ranges. Each device runs the self-decoder chunkwise on its range and
hands its per-layer carried state to the next device, so recurrent
dependencies only ever cross adjacent devices. Every device projects its
local rows of the shared key/value cache; one all-gather assembles the
full cache; cross-decoder queries then stay local against the shared
read-only cache. Communication is modeled as an explicit event trace
rather than real transport, because the claims under test are about
event frequency and payload volume, not wall-clock speed.

The whole simulation is sequential and functional: running devices in
order must give results identical to single-device execution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import tensor as T
from .config import ModelConfig
from .model import (
    Params,
    cross_decoder_forward,
    kv_project,
    self_decoder_forward,
    validate_tokens,
)
from .swa import WindowCache
from .tensor import Tensor

__all__ = [
    "ChunkPlan", "CommEvent", "CommTrace",
    "plan_chunks", "simulate_forward", "comm_stats", "write_trace_jsonl",
]

HANDOFF = "state_handoff"
ALLGATHER = "kv_allgather"


@dataclass(frozen=True)
class ChunkPlan:
    """Contiguous, ordered token ranges covering positions [0, n)."""

    n: int
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"sequence length must be positive, got {self.n}")
        if not self.ranges:
            raise ValueError("plan needs at least one range")
        cursor = 0
        for start, end in self.ranges:
            if start != cursor or end <= start:
                raise ValueError(
                    f"ranges must be contiguous, ordered, and nonempty; got "
                    f"{self.ranges}")
            cursor = end
        if cursor != self.n:
            raise ValueError(f"ranges cover [0, {cursor}) but n = {self.n}")

    @property
    def devices(self) -> int:
        return len(self.ranges)


def plan_chunks(n: int, devices: int) -> ChunkPlan:
    """Near-equal contiguous split; any remainder goes to earlier devices."""
    if devices < 1:
        raise ValueError(f"device count must be positive, got {devices}")
    if devices > n:
        raise ValueError(f"cannot split {n} tokens over {devices} devices")
    base, remainder = divmod(n, devices)
    ranges = []
    cursor = 0
    for d in range(devices):
        size = base + (1 if d < remainder else 0)
        ranges.append((cursor, cursor + size))
        cursor += size
    return ChunkPlan(n=n, ranges=tuple(ranges))


@dataclass(frozen=True)
class CommEvent:
    """One communication event. The all-gather is a collective, so it
    carries no layer or endpoints, only its total payload."""

    kind: str
    layer: int | None
    src: int | None
    dst: int | None
    values: int


@dataclass
class CommTrace:
    events: list[CommEvent] = field(default_factory=list)

    def add(self, **kwargs) -> None:
        self.events.append(CommEvent(**kwargs))

    def handoffs(self) -> list[CommEvent]:
        return [e for e in self.events if e.kind == HANDOFF]

    def allgathers(self) -> list[CommEvent]:
        return [e for e in self.events if e.kind == ALLGATHER]


def _state_payload(state) -> int:
    if isinstance(state, WindowCache):
        return state.value_count
    if isinstance(state, list):  # one GateState per head
        return sum(s.s.size for s in state)
    raise TypeError(f"unknown carried state {type(state).__name__}")


def simulate_forward(plan: ChunkPlan, params: Params, config: ModelConfig,
                     tokens) -> tuple[Tensor, CommTrace]:
    """Run the split forward pass; returns full logits and the event trace.

    Devices execute in order. After a device finishes its range, one
    handoff event per self-decoder layer moves its carried state to the
    next device. After all devices project their local cache rows, a
    single all-gather event moves the complete cache (2 n d_kv values)
    to everyone; it is emitted even for one device, where it degenerates
    to a local no-op.
    """
    ids = validate_tokens(tokens, config)
    if ids.size != plan.n:
        raise ValueError(f"plan covers {plan.n} tokens but got {ids.size}")
    trace = CommTrace()
    x = T.take_rows(params.embed, ids)

    m_parts: list[Tensor] = []
    k_parts: list[Tensor] = []
    v_parts: list[Tensor] = []
    states = None
    for device, (start, end) in enumerate(plan.ranges):
        local = T.slice_rows(x, start, end)
        m_local, states = self_decoder_forward(
            local, params, config, mode="chunkwise", states=states,
            start_pos=start)
        k_local, v_local = kv_project(m_local, params, config, start_pos=start)
        m_parts.append(m_local)
        k_parts.append(k_local)
        v_parts.append(v_local)
        if device + 1 < plan.devices:
            for layer, state in enumerate(states):
                trace.add(kind=HANDOFF, layer=layer, src=device, dst=device + 1,
                          values=_state_payload(state))

    k_hat = T.concat_rows(k_parts) if len(k_parts) > 1 else k_parts[0]
    v_hat = T.concat_rows(v_parts) if len(v_parts) > 1 else v_parts[0]
    trace.add(kind=ALLGATHER, layer=None, src=None, dst=None,
              values=2 * plan.n * config.d_kv)

    logits_parts = []
    for device, (start, end) in enumerate(plan.ranges):
        y = cross_decoder_forward(m_parts[device], k_hat, v_hat, params, config,
                                  query_start=start)
        h = T.rmsnorm(y, params.final_norm, config.rmsnorm_eps)
        classifier = params.classifier if params.classifier is not None \
            else T.transpose(params.embed)
        logits_parts.append(T.matmul(h, classifier))
    logits = T.concat_rows(logits_parts) if len(logits_parts) > 1 else logits_parts[0]
    return T.ensure_finite(logits, "logits"), trace


def comm_stats(trace: CommTrace) -> dict[str, int]:
    """Aggregate counts: handoffs, all-gathers, total values moved."""
    return {
        "handoff_count": len(trace.handoffs()),
        "allgather_count": len(trace.allgathers()),
        "total_values_moved": sum(e.values for e in trace.events),
    }


def write_trace_jsonl(trace: CommTrace, path) -> None:
    """One event per line with keys kind, layer, src, dst, values."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in trace.events:
            fh.write(json.dumps({"kind": e.kind, "layer": e.layer, "src": e.src,
                                 "dst": e.dst, "values": e.values}))
            fh.write("\n")
