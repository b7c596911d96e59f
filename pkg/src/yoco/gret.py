"""Gated retention: linear attention with learned per-position decay.

Three mathematically equivalent evaluation paradigms are provided:

* parallel: materializes the full n x n decay-weighted score matrix,
* recurrent: one position at a time against a running d x d state,
* chunkwise: blocks of positions with an exact state handoff between
  blocks, linear in sequence length for fixed block size.

Decay factors live in (0, 1] per head and position. All products of
decay factors are formed in log space (cumulative sums of log decay)
and exponentiated at the end, so long sequences cannot underflow to
zero prematurely or overflow. The chunkwise paradigm runs on raw
arrays with a hand-derived analytic backward registered on the tape,
which the other taped paradigms are checked against.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rope import rope_apply
from .tensor import NonFiniteError, ShapeError, Tensor, _active_tape

DEFAULT_TAU = 16.0
GROUP_NORM_EPS = 1e-6

PARADIGMS = ("parallel", "recurrent", "chunkwise")

# Verification back door: named multipliers applied to internal terms so a
# test or the CLI can corrupt the math on purpose and prove the invariant
# suites catch it. Empty in normal operation.
_FAULTS: dict[str, float] = {}

FAULT_NAMES = ("chunkwise_cross_scale",)


@contextmanager
def inject_fault(name: str, scale: float):
    """Temporarily scale an internal quantity (see FAULT_NAMES)."""
    if name not in FAULT_NAMES:
        raise ValueError(f"unknown fault {name!r}, expected one of {FAULT_NAMES}")
    previous = _FAULTS.get(name)
    _FAULTS[name] = float(scale)
    try:
        yield
    finally:
        if previous is None:
            _FAULTS.pop(name, None)
        else:
            _FAULTS[name] = previous


@dataclass(frozen=True)
class DecaySchedule:
    """Per-head, per-position decay factors with their logarithms.

    gamma and log_gamma are [heads, n]. Decay values are strictly
    positive and at most 1 (low-precision rounding may reach 1.0 even
    though the generating sigmoid is strictly below it). tau is the
    temperature the raw gate logits were flattened with.
    """

    gamma: Tensor
    log_gamma: Tensor
    tau: float

    def __post_init__(self):
        if self.gamma.shape != self.log_gamma.shape or self.gamma.ndim != 2:
            raise ShapeError(
                f"decay shapes {self.gamma.shape} and {self.log_gamma.shape} must be equal 2-D")
        if self.tau < 1.0:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        g, lg = self.gamma.data, self.log_gamma.data
        if not np.isfinite(lg).all():
            raise NonFiniteError("log decay values must be finite")
        if (g <= 0.0).any() or (g > 1.0).any() or (lg > 0.0).any():
            raise ValueError("decay values must lie in (0, 1]")

    @property
    def heads(self) -> int:
        return self.gamma.shape[0]

    @property
    def length(self) -> int:
        return self.gamma.shape[1]

    @classmethod
    def from_gamma(cls, gamma, tau: float = DEFAULT_TAU) -> "DecaySchedule":
        g = gamma if isinstance(gamma, Tensor) else Tensor(gamma)
        with np.errstate(divide="ignore"):
            lg = np.log(g.data)
        return cls(g, Tensor._wrap(lg), tau)

    def head_log_row(self, head: int) -> Tensor:
        """Log decay for one head as a [1, n] tensor (differentiable slice)."""
        return T.slice_rows(self.log_gamma, head, head + 1)

    def gamma_value(self, head: int, i: int) -> float:
        return float(self.gamma.data[head, i])

    def slice_positions(self, start: int, stop: int) -> "DecaySchedule":
        return DecaySchedule(
            T.slice_cols(self.gamma, start, stop),
            T.slice_cols(self.log_gamma, start, stop),
            self.tau,
        )


def decay_from_input(x: Tensor, w_gamma: Tensor, tau: float = DEFAULT_TAU) -> DecaySchedule:
    """Data-dependent decay: sigmoid(x @ w_gamma)^(1/tau), head per column.

    Computed as exp(logsigmoid(...) / tau); the temperature tau pushes the
    factors toward 1 so the state forgets slowly.
    """
    logits = T.matmul(x, w_gamma)
    lg = T.scale(T.transpose(T.logsigmoid(logits)), 1.0 / tau)
    return DecaySchedule(T.exp(lg), lg, tau)


@dataclass(frozen=True)
class GateState:
    """Running key-value summary for one head.

    s is [d_head, d_v]; position counts how many sequence positions have
    been absorbed. States are single-owner values: advancing produces a
    new state, and replaying an old one recomputes that prefix.
    """

    s: Tensor
    position: int = 0


def initial_gate_state(d_head: int, d_v: int | None = None, dtype=np.float64) -> GateState:
    return GateState(T.zeros((d_head, d_v if d_v is not None else d_head), dtype=dtype), 0)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("q, k, v must be 2-D")
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ShapeError(f"inconsistent q/k/v shapes {q.shape}, {k.shape}, {v.shape}")


# ---------------------------------------------------------------------------
# Parallel paradigm
# ---------------------------------------------------------------------------


def gret_parallel(q: Tensor, k: Tensor, v: Tensor, decay: DecaySchedule,
                  head: int = 0) -> Tensor:
    """Full-sequence retention: (q k^T elementwise decay-masked) v.

    The decay weight for query n attending key m <= n is the product of
    the decay factors at positions m+1..n, formed as exp of a difference
    of log-decay cumulative sums. Future positions are masked to -inf
    before the exp, so they contribute exactly zero.
    """
    _check_qkv(q, k, v)
    n = q.shape[0]
    if decay.length != n:
        raise ShapeError(f"decay length {decay.length} != sequence length {n}")
    lg = decay.head_log_row(head)
    c = T.cumsum(lg, axis=1)
    dlog = T.outer_diff(c, c)
    masked = T.add(dlog, T.causal_mask(n, dtype=dlog.dtype))
    dmat = T.exp(masked)
    scores = T.matmul(q, T.transpose(k))
    out = T.matmul(T.mul(scores, dmat), v)
    return T.ensure_finite(out, "parallel retention output")


# ---------------------------------------------------------------------------
# Recurrent paradigm
# ---------------------------------------------------------------------------


def gret_recurrent_step(q_row: Tensor, k_row: Tensor, v_row: Tensor,
                        gamma_n: float, state: GateState) -> tuple[Tensor, GateState]:
    """Advance one position: s <- gamma * s + k^T v, output q s.

    Rows are [1, d]; gamma_n is this position's decay factor.
    """
    _check_qkv(q_row, k_row, v_row)
    if q_row.shape[0] != 1:
        raise ShapeError(f"recurrent step takes single rows, got {q_row.shape[0]}")
    if not (0.0 < gamma_n <= 1.0):
        raise ValueError(f"decay factor must lie in (0, 1], got {gamma_n}")
    if state.s.shape != (k_row.shape[1], v_row.shape[1]):
        raise ShapeError(f"state shape {state.s.shape} does not match k/v widths")
    s_new = T.add(T.scale(state.s, gamma_n), T.matmul(T.transpose(k_row), v_row))
    T.ensure_finite(s_new, "retention state")
    out = T.matmul(q_row, s_new)
    return out, GateState(s_new, state.position + 1)


# ---------------------------------------------------------------------------
# Chunkwise paradigm (raw-array forward, analytic backward)
# ---------------------------------------------------------------------------


@dataclass
class ChunkwiseSaved:
    """Forward values retained for the analytic chunkwise backward."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    log_gamma: np.ndarray   # [b] local log decay
    r_prev: np.ndarray
    c: np.ndarray           # cumulative log decay within the chunk
    beta: np.ndarray        # exp(c): decay from chunk entry to each position
    dmat: np.ndarray        # within-chunk pairwise decay, lower triangular
    scores: np.ndarray      # q k^T
    qr: np.ndarray          # q r_prev
    zeta: np.ndarray        # decay from each position to chunk exit
    total: float            # decay across the whole chunk


def _chunkwise_core(qd, kd, vd, lgd, rd):
    b = qd.shape[0]
    c = np.cumsum(lgd)
    beta = np.exp(c)
    diff = c[:, None] - c[None, :]
    exponent = np.where(np.tril(np.ones((b, b), dtype=bool)), diff, -np.inf)
    dmat = np.exp(exponent)
    scores = qd @ kd.T
    inner = (scores * dmat) @ vd
    qr = qd @ rd * _FAULTS.get("chunkwise_cross_scale", 1.0)
    out = inner + qr * beta[:, None]
    zeta = np.exp(c[-1] - c)
    total = float(np.exp(c[-1]))
    r_new = kd.T @ (vd * zeta[:, None]) + total * rd
    saved = ChunkwiseSaved(qd, kd, vd, lgd, rd, c, beta, dmat, scores, qr, zeta, total)
    return out, r_new, saved


def gret_chunkwise_backward(saved: ChunkwiseSaved, grad_out: np.ndarray,
                            grad_state: np.ndarray):
    """Gradients of (chunk output, new state) w.r.t. (q, k, v, log decay, old state).

    grad_out is [b, d_v] against the chunk output; grad_state is
    [d_head, d_v] against the carried-out state. Returns numpy arrays
    (g_q, g_k, g_v, g_log_gamma, g_r_prev) with g_log_gamma 1-D of
    length b.
    """
    if saved is None:
        raise ValueError("chunkwise backward needs the saved forward values")
    s = saved
    masked = grad_out @ s.v.T * s.dmat   # gradient into the decayed score matrix
    g_q = masked @ s.k + (grad_out * s.beta[:, None]) @ s.r_prev.T
    g_k = masked.T @ s.q + (s.v * s.zeta[:, None]) @ grad_state.T
    kgr = s.k @ grad_state
    g_v = (s.scores * s.dmat).T @ grad_out + kgr * s.zeta[:, None]
    g_r_prev = s.q.T @ (grad_out * s.beta[:, None]) + s.total * grad_state

    # Collapse every exp(c_i - c_j) path into a gradient on the cumulative
    # log decay c, then push through the cumulative sum.
    g_dmat = (grad_out @ s.v.T) * s.scores * s.dmat
    g_c = g_dmat.sum(axis=1) - g_dmat.sum(axis=0)
    g_c += (grad_out * s.qr).sum(axis=1) * s.beta
    g_zeta = (kgr * s.v).sum(axis=1)
    g_c -= g_zeta * s.zeta
    g_c[-1] += float((g_zeta * s.zeta).sum())
    g_c[-1] += float((grad_state * s.r_prev).sum()) * s.total
    g_lg = np.flip(np.cumsum(np.flip(g_c)))
    return g_q, g_k, g_v, g_lg, g_r_prev


def gret_chunkwise(q: Tensor, k: Tensor, v: Tensor, decay: DecaySchedule,
                   r_prev: GateState, head: int = 0) -> tuple[Tensor, GateState]:
    """One chunk of retention given the state carried in from earlier chunks.

    decay must be sliced to exactly this chunk's positions. The output
    combines within-chunk retention with the carried state attenuated by
    the running decay; the returned state summarizes the whole prefix.
    """
    _check_qkv(q, k, v)
    b = q.shape[0]
    if decay.length != b:
        raise ShapeError(f"decay slice length {decay.length} != chunk length {b}")
    if r_prev.s.shape != (k.shape[1], v.shape[1]):
        raise ShapeError(f"carried state shape {r_prev.s.shape} does not match k/v widths")
    lg = decay.head_log_row(head)
    out_d, r_new_d, saved = _chunkwise_core(q.data, k.data, v.data,
                                            lg.data.ravel(), r_prev.s.data)
    out = Tensor._wrap(out_d)
    r_new = Tensor._wrap(r_new_d)
    T.ensure_finite(out, "chunkwise retention output")
    T.ensure_finite(r_new, "chunkwise retention state")
    tape = _active_tape()
    if tape is not None:
        def backward(g_out, g_state):
            g_q, g_k, g_v, g_lg, g_r = gret_chunkwise_backward(saved, g_out, g_state)
            return g_q, g_k, g_v, g_lg.reshape(lg.shape), g_r
        tape.record((out, r_new), (q, k, v, lg, r_prev.s), backward)
    return out, GateState(r_new, r_prev.position + b)


# ---------------------------------------------------------------------------
# Multi-head assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GretWeights:
    """Projections for one multi-head gated-retention block."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_gamma: Tensor  # [d_model, heads] decay gate logits
    w_gate: Tensor   # output gate projection
    w_out: Tensor    # [heads * d_head, d_model]


def mhgr_forward(x: Tensor, weights: GretWeights, n_heads: int, d_head: int, *,
                 paradigm: str = "parallel", states: list[GateState] | None = None,
                 start_pos: int = 0, chunk: int | None = None,
                 tau: float = DEFAULT_TAU, rope_theta: float | None = None,
                 use_group_norm: bool = True) -> tuple[Tensor, list[GateState] | None]:
    """Multi-head gated retention with per-head normalization and output gate.

    Heads run the requested paradigm independently, each output row is
    normalized across its head features, heads are concatenated, and the
    result is gated by swish(x @ w_gate) before the output projection.
    Queries are scaled by d_head^-1/2 before retention; with rope_theta
    set, queries and keys are position-rotated at absolute positions
    start_pos + i. Returns the block output and the per-head states
    (None in the parallel paradigm, which must start from scratch).
    """
    if paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}, expected one of {PARADIGMS}")
    if paradigm == "parallel" and states is not None:
        raise ValueError("parallel paradigm cannot resume from carried states")
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D input, got shape {x.shape}")
    n = x.shape[0]
    d_inner = n_heads * d_head
    if weights.w_q.shape[1] != d_inner or weights.w_out.shape[0] != d_inner:
        raise ShapeError(f"weights do not match {n_heads} heads of width {d_head}")
    if weights.w_gamma.shape[1] != n_heads:
        raise ShapeError(f"decay gate has {weights.w_gamma.shape[1]} heads, expected {n_heads}")

    q = T.matmul(x, weights.w_q)
    k = T.matmul(x, weights.w_k)
    v = T.matmul(x, weights.w_v)
    decay = decay_from_input(x, weights.w_gamma, tau)
    inv_scale = float(d_head) ** -0.5

    head_outs: list[Tensor] = []
    states_out: list[GateState] = []
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = T.scale(T.slice_cols(q, lo, hi), inv_scale)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        if rope_theta is not None:
            qh = rope_apply(qh, rope_theta, start_pos)
            kh = rope_apply(kh, rope_theta, start_pos)
        st = states[h] if states is not None else initial_gate_state(d_head, dtype=x.dtype)

        if paradigm == "parallel":
            oh = gret_parallel(qh, kh, vh, decay, head=h)
            st = None
        elif paradigm == "chunkwise":
            block = chunk if chunk is not None else n
            if block < 1:
                raise ValueError(f"chunk size must be >= 1, got {block}")
            pieces = []
            for cs in range(0, n, block):
                ce = min(cs + block, n)
                piece, st = gret_chunkwise(
                    T.slice_rows(qh, cs, ce), T.slice_rows(kh, cs, ce),
                    T.slice_rows(vh, cs, ce), decay.slice_positions(cs, ce),
                    st, head=h)
                pieces.append(piece)
            oh = T.concat_rows(pieces)
        else:  # recurrent
            pieces = []
            for i in range(n):
                piece, st = gret_recurrent_step(
                    T.slice_rows(qh, i, i + 1), T.slice_rows(kh, i, i + 1),
                    T.slice_rows(vh, i, i + 1), decay.gamma_value(h, i), st)
                pieces.append(piece)
            oh = T.concat_rows(pieces)

        if use_group_norm:
            oh = T.normalize_rows(oh, GROUP_NORM_EPS)
        head_outs.append(oh)
        if st is not None:
            states_out.append(st)

    merged = T.concat_cols(head_outs)
    gate = T.swish(T.matmul(x, weights.w_gate))
    out = T.matmul(T.mul(gate, merged), weights.w_out)
    T.ensure_finite(out, "retention block output")
    return out, (states_out if paradigm != "parallel" else None)
