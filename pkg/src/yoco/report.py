"""Figure rendering for the CLI report paths.

Figures are a visual companion to the CSV files, which stay the canonical
machine-readable output. matplotlib is imported lazily and forced onto
the Agg backend so rendering works headless.
"""

from __future__ import annotations

__all__ = ["render_bench_figure", "render_parsim_figure"]


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def render_bench_figure(rows: list[dict], path) -> None:
    """Two panels over prompt length: cache bytes and prefill attention FLOPs.

    rows are the benchmark CSV rows as dicts with keys n, model, kv_bytes,
    attn_flops_prefill.
    """
    plt = _pyplot()
    models = sorted({r["model"] for r in rows})
    fig, (ax_mem, ax_flops) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for model in models:
        series = sorted((r for r in rows if r["model"] == model),
                        key=lambda r: r["n"])
        ns = [r["n"] for r in series]
        ax_mem.plot(ns, [r["kv_bytes"] for r in series], marker="o", label=model)
        ax_flops.plot(ns, [r["attn_flops_prefill"] for r in series],
                      marker="o", label=model)
    for ax, title in ((ax_mem, "kv cache bytes"),
                      (ax_flops, "prefill attention FLOPs")):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("prompt length n")
        ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_parsim_figure(rows: list[dict], path) -> None:
    """Communication events and payload volume against device count.

    rows are the summary CSV rows as dicts with keys P, handoffs,
    allgathers, values_moved.
    """
    plt = _pyplot()
    series = sorted(rows, key=lambda r: r["P"])
    devices = [r["P"] for r in series]
    fig, (ax_events, ax_values) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    ax_events.plot(devices, [r["handoffs"] for r in series], marker="o",
                   label="state handoffs")
    ax_events.plot(devices, [r["allgathers"] for r in series], marker="s",
                   label="cache all-gathers")
    ax_events.set_ylabel("events per forward")
    ax_events.legend()
    ax_values.plot(devices, [r["values_moved"] for r in series], marker="o",
                   color="tab:red")
    ax_values.set_ylabel("values moved")
    for ax in (ax_events, ax_values):
        ax.set_xlabel("devices P")
        ax.set_xticks(devices)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
