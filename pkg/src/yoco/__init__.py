"""Decoder-decoder language model runtime with a single shared key/value cache."""

from .config import PRESETS, ModelConfig, get_preset, load_config, save_config
from .engine import (
    CostReport,
    EngineState,
    cost_report,
    decode_step,
    generate,
    prefill,
    tokens_supported,
)
from .model import Params, forward_full, init_params, load_params, save_params
from .parsim import CommTrace, comm_stats, plan_chunks, simulate_forward
from .verify import SuiteResult, run_verification

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "ModelConfig",
    "get_preset",
    "load_config",
    "save_config",
    "CostReport",
    "EngineState",
    "cost_report",
    "decode_step",
    "generate",
    "prefill",
    "tokens_supported",
    "Params",
    "forward_full",
    "init_params",
    "load_params",
    "save_params",
    "CommTrace",
    "comm_stats",
    "plan_chunks",
    "simulate_forward",
    "SuiteResult",
    "run_verification",
    "__version__",
]
