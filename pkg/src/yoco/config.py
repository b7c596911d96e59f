"""Model configuration: validated hyperparameters, presets, JSON round trip."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

SELF_ATTN_KINDS = ("gret", "swa")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one decoder-decoder model.

    The first layers/2 blocks form the self-decoder (gated retention or
    sliding-window attention per self_attn_kind); the remaining layers/2
    blocks form the cross-decoder reading the single shared KV cache.
    """

    layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    ffn_dim: int
    vocab_size: int
    self_attn_kind: str = "gret"
    window: int = 1024
    chunk: int = 256
    tau: float = 16.0
    rope_theta: float = 10000.0
    rmsnorm_eps: float = 1e-5
    max_seq_len: int = 4096
    tied_embedding: bool = False

    def __post_init__(self):
        if self.layers < 2 or self.layers % 2 != 0:
            raise ValueError(f"layers must be even and >= 2, got {self.layers}")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model {self.d_model} != n_heads {self.n_heads} * d_head {self.d_head}")
        if self.n_kv_heads < 1 or self.n_heads % self.n_kv_heads != 0:
            raise ValueError(
                f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.d_head < 2 or self.d_head % 2 != 0:
            raise ValueError(f"d_head must be even and >= 2, got {self.d_head}")
        if self.self_attn_kind not in SELF_ATTN_KINDS:
            raise ValueError(
                f"self_attn_kind must be one of {SELF_ATTN_KINDS}, got {self.self_attn_kind!r}")
        for name in ("ffn_dim", "vocab_size", "window", "chunk", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.tau < 1.0:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.rope_theta <= 0:
            raise ValueError(f"rope_theta must be positive, got {self.rope_theta}")
        if self.rmsnorm_eps <= 0:
            raise ValueError(f"rmsnorm_eps must be positive, got {self.rmsnorm_eps}")

    @property
    def d_kv(self) -> int:
        """Width of one key or value row: n_kv_heads * d_head."""
        return self.n_kv_heads * self.d_head

    @property
    def n_self_layers(self) -> int:
        return self.layers // 2

    @property
    def n_cross_layers(self) -> int:
        return self.layers // 2


_FIELD_NAMES = tuple(f.name for f in dataclasses.fields(ModelConfig))


def config_from_dict(data: dict) -> ModelConfig:
    """Build a config from a JSON-style dict, rejecting unknown fields."""
    if not isinstance(data, dict):
        raise ValueError(f"config must be a JSON object, got {type(data).__name__}")
    unknown = sorted(set(data) - set(_FIELD_NAMES))
    if unknown:
        raise ValueError(f"unknown config fields: {', '.join(unknown)}")
    try:
        return ModelConfig(**data)
    except TypeError as exc:
        raise ValueError(f"incomplete config: {exc}") from exc


def config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def save_config(config: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _size_preset(d_model: int, layers: int, n_heads: int) -> ModelConfig:
    # Scaling-ladder shape: query and kv head counts equal, FFN three times
    # the hidden width, shared vocabulary.
    return ModelConfig(
        layers=layers, d_model=d_model, n_heads=n_heads, n_kv_heads=n_heads,
        d_head=d_model // n_heads, ffn_dim=3 * d_model, vocab_size=100288)


def _yoco_3b(rope_theta: float = 10000.0, max_seq_len: int = 4096) -> ModelConfig:
    return ModelConfig(
        layers=26, d_model=3072, n_heads=24, n_kv_heads=8, d_head=128,
        ffn_dim=8192, vocab_size=100288, self_attn_kind="gret", window=1024,
        chunk=256, rope_theta=rope_theta, max_seq_len=max_seq_len)


def _tiny(kind: str) -> ModelConfig:
    # Small enough for exhaustive testing, large enough to exercise grouped
    # heads; FFN is 8/3 of the width rounded up to a multiple of 8.
    return ModelConfig(
        layers=4, d_model=32, n_heads=2, n_kv_heads=1, d_head=16, ffn_dim=88,
        vocab_size=97, self_attn_kind=kind, window=8, chunk=16, max_seq_len=512)


PRESETS: dict[str, ModelConfig] = {
    "tiny-gret": _tiny("gret"),
    "tiny-swa": _tiny("swa"),
    "yoco-3b": _yoco_3b(),
    # Length-extension schedule: larger rotation bases for longer contexts.
    "yoco-3b-64k": _yoco_3b(rope_theta=640_000.0, max_seq_len=65_536),
    "yoco-3b-256k": _yoco_3b(rope_theta=5_000_000.0, max_seq_len=262_144),
    "yoco-3b-1m": _yoco_3b(rope_theta=80_000_000.0, max_seq_len=1_048_576),
    # Scaling ladder (hidden width, layers, heads).
    "yoco-160m": _size_preset(768, 12, 12),
    "yoco-400m": _size_preset(1024, 24, 16),
    "yoco-830m": _size_preset(1536, 24, 12),
    "yoco-1.4b": _size_preset(2048, 24, 16),
    "yoco-2.7b": _size_preset(2560, 32, 20),
    "yoco-6.8b": _size_preset(4096, 32, 32),
    "yoco-13b": _size_preset(5120, 40, 40),
    # 65B-scale shape with grouped kv heads, used for memory-budget anchors.
    "yoco-65b": ModelConfig(layers=80, d_model=8192, n_heads=64, n_kv_heads=8,
                            d_head=128, ffn_dim=22016, vocab_size=32000),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
