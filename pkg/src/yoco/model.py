"""Decoder-decoder assembly.

The stack embeds tokens, runs layers/2 self-decoder blocks (gated
retention or sliding-window attention), projects the self-decoder output
once into a single shared key/value cache, runs layers/2 cross-decoder
blocks whose queries all attend that one cache, and ends with a norm and
classifier. Blocks are pre-norm residual: attention and gated FFN each
read a normalized copy of the stream and add their result back.

Weights serialize as a JSON manifest (name, shape, dtype, byte offset,
plus the config) next to a flat little-endian float32 blob.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, config_from_dict, config_to_dict
from .gret import GateState, GretWeights, mhgr_forward
from .rope import rope_apply, rope_apply_heads
from .swa import (
    SwaWeights,
    WindowCache,
    empty_window_cache,
    grouped_attention,
    swa_forward,
    swa_step,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "FfnWeights", "SelfLayerParams", "CrossLayerParams", "Params",
    "param_shapes", "init_params", "count_params", "count_non_embedding_params",
    "swiglu", "self_decoder_forward", "kv_project", "cross_decoder_forward",
    "forward_full", "save_params", "load_params", "rope_apply",
]

MODES = ("parallel", "chunkwise", "step")


@dataclass(frozen=True)
class FfnWeights:
    """Gated FFN: (swish(x w_gate) * (x w_up)) w_down."""

    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass(frozen=True)
class SelfLayerParams:
    norm_attn: Tensor
    attn: GretWeights | SwaWeights
    norm_ffn: Tensor
    ffn: FfnWeights


@dataclass(frozen=True)
class CrossLayerParams:
    norm_attn: Tensor
    w_q: Tensor
    w_out: Tensor
    norm_ffn: Tensor
    ffn: FfnWeights


@dataclass(frozen=True)
class Params:
    """All weights of one model, immutable after construction."""

    embed: Tensor
    self_layers: tuple[SelfLayerParams, ...]
    kv_norm: Tensor
    kv_w_k: Tensor
    kv_w_v: Tensor
    cross_layers: tuple[CrossLayerParams, ...]
    final_norm: Tensor
    classifier: Tensor | None  # None when tied to the embedding

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Every tensor with its canonical name, in serialization order."""
        out = [("embed", self.embed)]
        for i, layer in enumerate(self.self_layers):
            p = f"self.{i}."
            out.append((p + "norm_attn", layer.norm_attn))
            if isinstance(layer.attn, GretWeights):
                a = layer.attn
                out += [(p + "attn.w_q", a.w_q), (p + "attn.w_k", a.w_k),
                        (p + "attn.w_v", a.w_v), (p + "attn.w_gamma", a.w_gamma),
                        (p + "attn.w_gate", a.w_gate), (p + "attn.w_out", a.w_out)]
            else:
                a = layer.attn
                out += [(p + "attn.w_q", a.w_q), (p + "attn.w_k", a.w_k),
                        (p + "attn.w_v", a.w_v), (p + "attn.w_out", a.w_out)]
            out.append((p + "norm_ffn", layer.norm_ffn))
            out += [(p + "ffn.w_gate", layer.ffn.w_gate), (p + "ffn.w_up", layer.ffn.w_up),
                    (p + "ffn.w_down", layer.ffn.w_down)]
        out += [("kv.norm", self.kv_norm), ("kv.w_k", self.kv_w_k), ("kv.w_v", self.kv_w_v)]
        for i, layer in enumerate(self.cross_layers):
            p = f"cross.{i}."
            out += [(p + "norm_attn", layer.norm_attn), (p + "attn.w_q", layer.w_q),
                    (p + "attn.w_out", layer.w_out), (p + "norm_ffn", layer.norm_ffn),
                    (p + "ffn.w_gate", layer.ffn.w_gate), (p + "ffn.w_up", layer.ffn.w_up),
                    (p + "ffn.w_down", layer.ffn.w_down)]
        out.append(("final_norm", self.final_norm))
        if self.classifier is not None:
            out.append(("classifier", self.classifier))
        return out

    def astype(self, dtype) -> "Params":
        tensors = {name: t.astype(dtype) for name, t in self.named_tensors()}
        return _params_from_tensors(_structure_hint(self), tensors)


def _structure_hint(params: Params) -> dict:
    """Just enough structure to rebuild a Params from named tensors."""
    return {
        "n_self": len(params.self_layers),
        "n_cross": len(params.cross_layers),
        "kind": "gret" if isinstance(params.self_layers[0].attn, GretWeights) else "swa",
        "tied": params.classifier is None,
    }


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list, derivable without allocating anything."""
    d, dq = config.d_model, config.n_heads * config.d_head
    dkv, ffn = config.d_kv, config.ffn_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [("embed", (config.vocab_size, d))]
    for i in range(config.n_self_layers):
        p = f"self.{i}."
        shapes.append((p + "norm_attn", (d,)))
        if config.self_attn_kind == "gret":
            shapes += [(p + "attn.w_q", (d, dq)), (p + "attn.w_k", (d, dq)),
                       (p + "attn.w_v", (d, dq)), (p + "attn.w_gamma", (d, config.n_heads)),
                       (p + "attn.w_gate", (d, dq)), (p + "attn.w_out", (dq, d))]
        else:
            shapes += [(p + "attn.w_q", (d, dq)), (p + "attn.w_k", (d, dkv)),
                       (p + "attn.w_v", (d, dkv)), (p + "attn.w_out", (dq, d))]
        shapes += [(p + "norm_ffn", (d,)), (p + "ffn.w_gate", (d, ffn)),
                   (p + "ffn.w_up", (d, ffn)), (p + "ffn.w_down", (ffn, d))]
    shapes += [("kv.norm", (d,)), ("kv.w_k", (d, dkv)), ("kv.w_v", (d, dkv))]
    for i in range(config.n_cross_layers):
        p = f"cross.{i}."
        shapes += [(p + "norm_attn", (d,)), (p + "attn.w_q", (d, dq)),
                   (p + "attn.w_out", (dq, d)), (p + "norm_ffn", (d,)),
                   (p + "ffn.w_gate", (d, ffn)), (p + "ffn.w_up", (d, ffn)),
                   (p + "ffn.w_down", (ffn, d))]
    shapes.append(("final_norm", (d,)))
    if not config.tied_embedding:
        shapes.append(("classifier", (d, config.vocab_size)))
    return shapes


def count_params(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_shapes(config))


def count_non_embedding_params(config: ModelConfig) -> int:
    """Body parameters: everything except the token embedding and classifier."""
    return sum(int(np.prod(shape)) for name, shape in param_shapes(config)
               if name not in ("embed", "classifier"))


def init_params(config: ModelConfig, seed: int, dtype=np.float64) -> Params:
    """Deterministic random weights: norm gains one, embedding unit-scale,
    projections scaled by d_model^-1/2. Values are drawn in float64 in a
    fixed order, then cast, so a seed pins the model for any dtype."""
    rng = np.random.default_rng(seed)
    std = config.d_model ** -0.5
    tensors: dict[str, Tensor] = {}
    for name, shape in param_shapes(config):
        if len(shape) == 1:
            arr = np.ones(shape)
        elif name == "embed":
            arr = rng.standard_normal(shape)
        else:
            arr = rng.standard_normal(shape) * std
        tensors[name] = Tensor._wrap(arr.astype(dtype))
    hint = {"n_self": config.n_self_layers, "n_cross": config.n_cross_layers,
            "kind": config.self_attn_kind, "tied": config.tied_embedding}
    return _params_from_tensors(hint, tensors)


def _params_from_tensors(hint: dict, tensors: dict[str, Tensor]) -> Params:
    def grab(name):
        return tensors[name]

    self_layers = []
    for i in range(hint["n_self"]):
        p = f"self.{i}."
        if hint["kind"] == "gret":
            attn = GretWeights(
                w_q=grab(p + "attn.w_q"), w_k=grab(p + "attn.w_k"),
                w_v=grab(p + "attn.w_v"), w_gamma=grab(p + "attn.w_gamma"),
                w_gate=grab(p + "attn.w_gate"), w_out=grab(p + "attn.w_out"))
        else:
            attn = SwaWeights(
                w_q=grab(p + "attn.w_q"), w_k=grab(p + "attn.w_k"),
                w_v=grab(p + "attn.w_v"), w_out=grab(p + "attn.w_out"))
        self_layers.append(SelfLayerParams(
            norm_attn=grab(p + "norm_attn"), attn=attn,
            norm_ffn=grab(p + "norm_ffn"),
            ffn=FfnWeights(grab(p + "ffn.w_gate"), grab(p + "ffn.w_up"),
                           grab(p + "ffn.w_down"))))
    cross_layers = []
    for i in range(hint["n_cross"]):
        p = f"cross.{i}."
        cross_layers.append(CrossLayerParams(
            norm_attn=grab(p + "norm_attn"), w_q=grab(p + "attn.w_q"),
            w_out=grab(p + "attn.w_out"), norm_ffn=grab(p + "norm_ffn"),
            ffn=FfnWeights(grab(p + "ffn.w_gate"), grab(p + "ffn.w_up"),
                           grab(p + "ffn.w_down"))))
    return Params(
        embed=grab("embed"), self_layers=tuple(self_layers),
        kv_norm=grab("kv.norm"), kv_w_k=grab("kv.w_k"), kv_w_v=grab("kv.w_v"),
        cross_layers=tuple(cross_layers), final_norm=grab("final_norm"),
        classifier=None if hint["tied"] else grab("classifier"))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def swiglu(x: Tensor, ffn: FfnWeights) -> Tensor:
    return T.matmul(T.mul(T.swish(T.matmul(x, ffn.w_gate)), T.matmul(x, ffn.w_up)),
                    ffn.w_down)


def _esa_forward(attn_in: Tensor, layer: SelfLayerParams, config: ModelConfig,
                 mode: str, state, start_pos: int, chunk: int):
    """Run one self-decoder attention block in the requested mode."""
    if config.self_attn_kind == "gret":
        paradigm = "recurrent" if mode == "step" else mode
        return mhgr_forward(
            attn_in, layer.attn, config.n_heads, config.d_head, paradigm=paradigm,
            states=state, start_pos=start_pos, chunk=chunk, tau=config.tau,
            rope_theta=config.rope_theta)
    n = attn_in.shape[0]
    if mode == "parallel":
        out, cache = swa_forward(
            attn_in, layer.attn, config.n_heads, config.n_kv_heads, config.d_head,
            config.window, start_pos=start_pos, rope_theta=config.rope_theta)
        return out, cache
    cache = state if state is not None else empty_window_cache(
        config.window, config.d_kv, dtype=attn_in.dtype)
    if mode == "chunkwise":
        blocks = []
        for cs in range(0, n, chunk):
            ce = min(cs + chunk, n)
            block, cache = swa_forward(
                T.slice_rows(attn_in, cs, ce), layer.attn, config.n_heads,
                config.n_kv_heads, config.d_head, config.window,
                start_pos=start_pos + cs, cache=cache, rope_theta=config.rope_theta)
            blocks.append(block)
        return T.concat_rows(blocks), cache
    rows = []
    for i in range(n):
        row, cache = swa_step(
            T.slice_rows(attn_in, i, i + 1), layer.attn, config.n_heads,
            config.n_kv_heads, config.d_head, cache, rope_theta=config.rope_theta)
        rows.append(row)
    return T.concat_rows(rows), cache


def self_decoder_forward(x: Tensor, params: Params, config: ModelConfig, *,
                         mode: str = "parallel", states: list | None = None,
                         start_pos: int = 0, chunk: int | None = None):
    """First half of the stack; returns its output and per-layer states.

    mode selects the attention evaluation: parallel (whole sequence, no
    carried state), chunkwise (blocks of `chunk`, default config.chunk),
    or step (position by position). Parallel mode returns None states;
    resuming past position 0 requires the states of the prefix.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    if mode == "parallel" and states is not None:
        raise ValueError("parallel mode cannot resume from carried states")
    if mode != "parallel" and states is None and start_pos > 0:
        raise ValueError(f"{mode} mode beyond position 0 requires prior states")
    if x.shape[1] != config.d_model:
        raise ShapeError(f"input width {x.shape[1]} != d_model {config.d_model}")
    block = chunk if chunk is not None else config.chunk
    states_out = []
    for i, layer in enumerate(params.self_layers):
        attn_in = T.rmsnorm(x, layer.norm_attn, config.rmsnorm_eps)
        att, st = _esa_forward(attn_in, layer, config, mode,
                               states[i] if states is not None else None,
                               start_pos, block)
        y = T.add(x, att)
        ffn_out = swiglu(T.rmsnorm(y, layer.norm_ffn, config.rmsnorm_eps), layer.ffn)
        x = T.add(y, ffn_out)
        states_out.append(st)
    return x, (None if mode == "parallel" else states_out)


def kv_project(m: Tensor, params: Params, config: ModelConfig, *,
               start_pos: int = 0) -> tuple[Tensor, Tensor]:
    """Project the self-decoder output into the shared key/value rows.

    Keys are position-rotated per kv head at absolute positions
    start_pos + i; values are left unrotated.
    """
    ln = T.rmsnorm(m, params.kv_norm, config.rmsnorm_eps)
    k_hat = rope_apply_heads(T.matmul(ln, params.kv_w_k), config.n_kv_heads,
                             config.d_head, config.rope_theta, start_pos)
    v_hat = T.matmul(ln, params.kv_w_v)
    return k_hat, v_hat


def cross_decoder_forward(x: Tensor, k_hat: Tensor, v_hat: Tensor, params: Params,
                          config: ModelConfig, *, query_start: int = 0,
                          kv_log: list | None = None) -> Tensor:
    """Second half of the stack: every layer attends the one shared cache.

    x rows are queries at absolute positions query_start + i; they may
    attend cache rows at positions up to their own. Passing kv_log
    collects (layer, id(k_hat), id(v_hat)) per layer, making the
    share-one-cache property observable.
    """
    q_len, n = x.shape[0], k_hat.shape[0]
    if k_hat.shape != v_hat.shape:
        raise ShapeError(f"cache shapes {k_hat.shape} and {v_hat.shape} differ")
    if query_start < 0 or query_start + q_len > n:
        raise ValueError(
            f"queries at positions [{query_start}, {query_start + q_len}) overrun "
            f"the {n}-row cache: a query may not attend beyond its own position")
    mask = T.causal_mask(q_len, n, offset=query_start, dtype=x.dtype)
    for i, layer in enumerate(params.cross_layers):
        ln = T.rmsnorm(x, layer.norm_attn, config.rmsnorm_eps)
        q = rope_apply_heads(T.matmul(ln, layer.w_q), config.n_heads, config.d_head,
                             config.rope_theta, query_start)
        merged = grouped_attention(q, k_hat, v_hat, mask, config.n_heads,
                                   config.n_kv_heads, config.d_head)
        att = T.matmul(merged, layer.w_out)
        if kv_log is not None:
            kv_log.append((i, id(k_hat), id(v_hat)))
        x = T.add(x, att)
        x = T.add(x, swiglu(T.rmsnorm(x, layer.norm_ffn, config.rmsnorm_eps), layer.ffn))
    T.ensure_finite(x, "cross-decoder output")
    return x


def _classifier_matrix(params: Params) -> Tensor:
    if params.classifier is not None:
        return params.classifier
    return T.transpose(params.embed)


def validate_tokens(tokens, config: ModelConfig) -> np.ndarray:
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be a nonempty 1-D list of ids")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(
            f"token id out of vocab: range [{ids.min()}, {ids.max()}] vs "
            f"vocab_size {config.vocab_size}")
    return ids


def forward_full(tokens, params: Params, config: ModelConfig, *,
                 mode: str = "parallel", chunk: int | None = None,
                 kv_log: list | None = None) -> Tensor:
    """Logits for every position of a token sequence in one pass."""
    ids = validate_tokens(tokens, config)
    if ids.size > config.max_seq_len:
        raise ValueError(f"sequence length {ids.size} exceeds max_seq_len "
                         f"{config.max_seq_len}")
    x = T.take_rows(params.embed, ids)
    m, _ = self_decoder_forward(x, params, config, mode=mode, chunk=chunk)
    k_hat, v_hat = kv_project(m, params, config)
    y = cross_decoder_forward(m, k_hat, v_hat, params, config, query_start=0,
                              kv_log=kv_log)
    h = T.rmsnorm(y, params.final_norm, config.rmsnorm_eps)
    logits = T.matmul(h, _classifier_matrix(params))
    return T.ensure_finite(logits, "logits")


# ---------------------------------------------------------------------------
# Weights files
# ---------------------------------------------------------------------------

_WEIGHTS_FORMAT = "yoco-weights"
_WEIGHTS_VERSION = 1


def save_params(params: Params, config: ModelConfig, base_path) -> tuple[str, str]:
    """Write {base}.json manifest and {base}.bin float32 blob; returns both paths.

    Tensors are stored little-endian float32 in named_tensors order, so a
    float32 Params round-trips bit-exactly.
    """
    base = os.fspath(base_path)
    manifest_path, blob_path = base + ".json", base + ".bin"
    entries = {}
    offset = 0
    chunks = []
    for name, t in params.named_tensors():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries[name] = {"shape": list(t.shape), "dtype": "f32", "offset": offset}
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "format": _WEIGHTS_FORMAT,
        "version": _WEIGHTS_VERSION,
        "dtype": "f32",
        "blob": os.path.basename(blob_path),
        "config": config_to_dict(config),
        "tensors": entries,
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(blob_path, "wb") as fh:
        fh.write(b"".join(chunks))
    return manifest_path, blob_path


def load_params(base_path) -> tuple[ModelConfig, Params]:
    """Read a manifest/blob pair written by save_params.

    Raises ValueError describing the problem for any malformed manifest:
    wrong format marker, missing or extra tensors, shape or size mismatch.
    """
    base = os.fspath(base_path)
    if base.endswith(".json"):
        base = base[:-5]
    manifest_path, blob_path = base + ".json", base + ".bin"
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid weights manifest: not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != _WEIGHTS_FORMAT:
        raise ValueError("invalid weights manifest: missing format marker "
                         f"{_WEIGHTS_FORMAT!r}")
    if manifest.get("version") != _WEIGHTS_VERSION:
        raise ValueError(f"invalid weights manifest: unsupported version "
                         f"{manifest.get('version')!r}")
    if manifest.get("dtype") != "f32":
        raise ValueError(f"invalid weights manifest: unsupported dtype "
                         f"{manifest.get('dtype')!r}")
    try:
        config = config_from_dict(manifest["config"])
    except KeyError:
        raise ValueError("invalid weights manifest: no embedded config") from None
    entries = manifest.get("tensors")
    if not isinstance(entries, dict):
        raise ValueError("invalid weights manifest: no tensor table")

    expected = dict(param_shapes(config))
    missing = sorted(set(expected) - set(entries))
    extra = sorted(set(entries) - set(expected))
    if missing or extra:
        raise ValueError("invalid weights manifest: tensor names do not match "
                         f"config (missing {missing[:3]}, extra {extra[:3]})")
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    tensors: dict[str, Tensor] = {}
    total = 0
    for name, shape in expected.items():
        entry = entries[name]
        if tuple(entry.get("shape", ())) != shape:
            raise ValueError(f"invalid weights manifest: {name} has shape "
                             f"{entry.get('shape')}, config implies {list(shape)}")
        count = int(np.prod(shape))
        offset = entry.get("offset")
        if not isinstance(offset, int) or offset < 0 or offset + 4 * count > len(blob):
            raise ValueError(f"invalid weights manifest: {name} offset/size outside blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = Tensor._wrap(arr.astype(np.float32).reshape(shape))
        total += 4 * count
    if total != len(blob):
        raise ValueError(f"invalid weights manifest: blob holds {len(blob)} bytes, "
                         f"tensors account for {total}")
    hint = {"n_self": config.n_self_layers, "n_cross": config.n_cross_layers,
            "kind": config.self_attn_kind, "tied": config.tied_embedding}
    return config, _params_from_tensors(hint, tensors)
