"""Command-line entry point.

Subcommands:

* verify: run the invariant suites and report pass/fail per suite.
* bench: write the analytic cache/FLOP accounting CSV for a sweep of
  prompt lengths, with a rendered figure next to it.
* generate: greedy-decode token ids from a seeded random-init model (or
  a weights file) and print them.
* parsim: run the chunk-parallel simulator, write its communication
  trace (JSONL) and summary CSV, and check output equivalence.

Exit codes are part of the contract; see EXIT_CODES / --help.
"""

from __future__ import annotations

import argparse
import csv
import sys
from contextlib import nullcontext

import numpy as np

from .config import PRESETS, ModelConfig, get_preset, load_config
from .engine import cost_report, generate
from .gret import FAULT_NAMES, inject_fault
from .model import forward_full, init_params, load_params
from .parsim import comm_stats, plan_chunks, simulate_forward, write_trace_jsonl
from .verify import PARADIGM_CHOICES, run_verification

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VERIFICATION = 3
EXIT_IO = 4
EXIT_WEIGHTS = 5

EXIT_CODES_HELP = """\
exit codes:
  0  success
  2  usage or configuration error (bad flag, unknown preset, malformed config)
  3  verification failure (an invariant or equivalence check did not hold)
  4  input/output error (unreadable or unwritable file)
  5  invalid weights manifest
"""

BENCH_HEADER = ["n", "model", "kv_values", "kv_bytes", "attn_flops_prefill",
                "layers_prefilled"]
PARSIM_HEADER = ["P", "handoffs", "allgathers", "values_moved"]


class UsageError(Exception):
    pass


def _resolve_config(value: str | None) -> ModelConfig:
    name = value if value is not None else "tiny-gret"
    if name in PRESETS:
        return get_preset(name)
    try:
        with open(name, "r", encoding="utf-8"):
            pass
    except OSError:
        raise UsageError(
            f"config {name!r} is neither a preset nor a readable file; presets: "
            + ", ".join(sorted(PRESETS))) from None
    try:
        return load_config(name)
    except ValueError as exc:
        raise UsageError(f"bad config file {name}: {exc}") from exc


def _dtype(precision: str):
    return np.float64 if precision == "f64" else np.float32


def _stem(path: str, suffix: str = ".csv") -> str:
    return path[:-len(suffix)] if path.endswith(suffix) else path


def _write_csv(path: str, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[col] for col in header])


def _random_prompt(seed: int, n: int, vocab: int) -> list[int]:
    return [int(t) for t in np.random.default_rng(seed).integers(0, vocab, size=n)]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_verify(args) -> int:
    config = _resolve_config(args.config)
    paradigms = tuple(args.paradigm) if args.paradigm else None
    if args.inject_fault:
        name, _, raw = args.inject_fault.partition("=")
        if name not in FAULT_NAMES:
            raise UsageError(f"unknown fault {name!r}; known: {', '.join(FAULT_NAMES)}")
        try:
            scale = float(raw)
        except ValueError:
            raise UsageError(
                f"--inject-fault wants NAME=SCALE, got {args.inject_fault!r}") from None
        context = inject_fault(name, scale)
    else:
        context = nullcontext()
    with context:
        results = run_verification(config, seed=args.seed,
                                   dtype=_dtype(args.precision),
                                   paradigms=paradigms)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} suites passed")
    return EXIT_OK if passed == len(results) else EXIT_VERIFICATION


def cmd_bench(args) -> int:
    config = _resolve_config(args.config)
    lengths = args.n if args.n else [1024, 4096, 16384, 65536]
    if any(n < 1 for n in lengths):
        raise UsageError("--n values must be positive")
    precision_bytes = 8 if args.precision == "f64" else 4
    rows = []
    for n in lengths:
        r = cost_report(config, n, precision_bytes, chunk=args.prefill_chunk)
        rows.append({"n": n, "model": "yoco",
                     "kv_values": r.kv_values_yoco,
                     "kv_bytes": r.kv_bytes_yoco,
                     "attn_flops_prefill": r.attn_flops_yoco,
                     "layers_prefilled": r.layers_prefilled_yoco})
        rows.append({"n": n, "model": "transformer",
                     "kv_values": r.kv_values_transformer,
                     "kv_bytes": r.kv_bytes_transformer,
                     "attn_flops_prefill": r.attn_flops_transformer,
                     "layers_prefilled": r.layers_prefilled_transformer})
    _write_csv(args.out, BENCH_HEADER, rows)
    written = [args.out]
    if not args.no_plot:
        from .report import render_bench_figure
        figure = _stem(args.out) + ".png"
        render_bench_figure(rows, figure)
        written.append(figure)
    print("wrote " + " ".join(written))
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.weights is not None and args.config is not None:
        raise UsageError("give either --weights or --config, not both")
    dtype = _dtype(args.precision)
    if args.weights is not None:
        config, params = load_params(args.weights)
        if params.embed.dtype != dtype:
            params = params.astype(dtype)
    else:
        config = _resolve_config(args.config)
        params = init_params(config, args.seed, dtype=dtype)
    if args.n < 1:
        raise UsageError("--n (prompt length) must be positive")
    if args.max_new < 0:
        raise UsageError("--max-new must be nonnegative")
    prompt = _random_prompt(args.seed, args.n, config.vocab_size)
    continuation = generate(prompt, params, config, args.max_new,
                            chunk=args.prefill_chunk)
    print(" ".join(str(t) for t in prompt + continuation))
    return EXIT_OK


def cmd_parsim(args) -> int:
    config = _resolve_config(args.config)
    dtype = _dtype(args.precision)
    params = init_params(config, args.seed, dtype=dtype)
    device_counts = args.devices if args.devices else [2]
    tokens = _random_prompt(args.seed + 1, args.n, config.vocab_size)
    tol = 1e-10 if dtype == np.float64 else 1e-4
    want = forward_full(tokens, params, config)
    stem = _stem(args.out)
    rows = []
    written = []
    all_ok = True
    for devices in device_counts:
        try:
            plan = plan_chunks(args.n, devices)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        logits, trace = simulate_forward(plan, params, config, tokens)
        diff = float(np.abs(logits.data - want.data).max())
        ok = diff <= tol
        all_ok = all_ok and ok
        stats = comm_stats(trace)
        rows.append({"P": devices, "handoffs": stats["handoff_count"],
                     "allgathers": stats["allgather_count"],
                     "values_moved": stats["total_values_moved"]})
        trace_path = f"{stem}-p{devices}.jsonl"
        write_trace_jsonl(trace, trace_path)
        written.append(trace_path)
        print(f"P={devices} equivalence {'PASS' if ok else 'FAIL'} "
              f"(max |diff| {diff:.3e}, tol {tol:.0e})")
    csv_path = stem + ".csv"
    _write_csv(csv_path, PARSIM_HEADER, rows)
    written.append(csv_path)
    if not args.no_plot:
        from .report import render_parsim_figure
        figure = stem + ".png"
        render_parsim_figure(rows, figure)
        written.append(figure)
    print("wrote " + " ".join(written))
    return EXIT_OK if all_ok else EXIT_VERIFICATION


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(sub, default_precision: str) -> None:
    sub.add_argument("--config", default=None, metavar="NAME_OR_PATH",
                     help="preset name or path to a config JSON file "
                          "(default tiny-gret)")
    sub.add_argument("--seed", type=int, default=0, help="rng seed (default 0)")
    sub.add_argument("--precision", choices=("f32", "f64"),
                     default=default_precision,
                     help=f"arithmetic precision (default {default_precision})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yoco",
        description="Decoder-decoder language model runtime with a single "
                    "shared key/value cache.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p_verify = sub.add_parser(
        "verify", help="run invariant suites",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p_verify, "f64")
    p_verify.add_argument("--paradigm", action="append",
                          choices=PARADIGM_CHOICES,
                          help="restrict retention comparisons to these "
                               "paradigms (repeatable)")
    p_verify.add_argument("--inject-fault", metavar="NAME=SCALE", default=None,
                          help="deliberately corrupt an internal term to prove "
                               f"the suites catch it; names: {', '.join(FAULT_NAMES)}")
    p_verify.set_defaults(func=cmd_verify)

    p_bench = sub.add_parser(
        "bench", help="write cache/FLOP accounting CSV and figure",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p_bench, "f32")
    p_bench.add_argument("--n", action="append", type=int, metavar="N",
                         help="prompt length, repeatable "
                              "(default 1024 4096 16384 65536)")
    p_bench.add_argument("--out", default="bench.csv", help="CSV output path")
    p_bench.add_argument("--prefill-chunk", type=int, default=None,
                         help="chunk size for the FLOP model")
    p_bench.add_argument("--no-plot", action="store_true",
                         help="skip rendering the figure next to the CSV")
    p_bench.set_defaults(func=cmd_bench)

    p_gen = sub.add_parser(
        "generate", help="greedy-decode token ids from a seeded model",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p_gen, "f32")
    p_gen.add_argument("--n", type=int, default=16,
                       help="prompt length, drawn from the seed (default 16)")
    p_gen.add_argument("--max-new", type=int, default=32,
                       help="tokens to generate (default 32)")
    p_gen.add_argument("--prefill-chunk", type=int, default=None,
                       help="prefill block size (result must not depend on it)")
    p_gen.add_argument("--weights", default=None, metavar="BASE",
                       help="load weights saved as BASE.json + BASE.bin "
                            "instead of seeding fresh ones")
    p_gen.set_defaults(func=cmd_generate)

    p_parsim = sub.add_parser(
        "parsim", help="simulate chunk parallelism and trace communication",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p_parsim, "f64")
    p_parsim.add_argument("--n", type=int, default=64,
                          help="sequence length (default 64)")
    p_parsim.add_argument("--devices", action="append", type=int, metavar="P",
                          help="virtual device count, repeatable (default 2)")
    p_parsim.add_argument("--out", default="parsim",
                          help="output stem for .csv/.jsonl/.png files")
    p_parsim.add_argument("--no-plot", action="store_true",
                          help="skip rendering the figure next to the CSV")
    p_parsim.set_defaults(func=cmd_parsim)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed a message; fold its exit into our codes
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        message = str(exc)
        print(f"error: {message}", file=sys.stderr)
        return EXIT_WEIGHTS if "invalid weights manifest" in message else EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
