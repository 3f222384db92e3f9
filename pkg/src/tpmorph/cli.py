"""Command-line entry points.

`sim run` drives the discrete-event simulator on a trace file or a
synthetic two-class workload and writes metrics (CSV or JSON-lines) plus
an optional JSON-lines event log. The planning subcommands expose the
KV-migration and weight-repartitioning planners directly, `check-ffn`
runs the numerical equivalence sweep, `tables` prints the derived
per-model page/throughput numbers, and `report` renders figures from a
finished run's metrics file.
"""
from __future__ import annotations

import sys
from fractions import Fraction

import click
import numpy as np

from .ffn_check import ACTIVATIONS, ffn, ffn_padded, pad_weights, shard_ffn
from .kv_layout import (
    HEADER_CENTRIC_ORDER,
    KvLayout,
    KvStore,
    plan_migration_inplace,
    plan_migration_trim,
)
from .metrics import write_event_log, write_metrics
from .models import get_model
from .scheduler import SchedulerConfig
from .simulator import ClusterConfig, PerfModel, run as run_sim
from .transform_engine import CostModel, build_plan, transformation_cost_summary
from .weight_plan import (
    make_padding_plan,
    mlp_tensors,
    model_padding_overhead,
    pages_per_tensor,
)
from .workload import gen_synthetic, load_trace


@click.group()
def main():
    """Cluster-level tensor-parallelism transformation simulator."""


@main.command("run")
@click.option("--trace", type=click.Path(exists=True), default=None,
              help="Workload trace file (arrival_ms, input, output per line).")
@click.option("--synthetic", is_flag=True,
              help="Generate a two-class Poisson workload instead.")
@click.option("--short-rate", default=60.0, show_default=True,
              help="Short-request arrival rate, queries/minute.")
@click.option("--long-rate", default=1.0, show_default=True,
              help="Long-request arrival rate, queries/minute.")
@click.option("--short-len", default=1000, show_default=True)
@click.option("--long-len", default=50000, show_default=True)
@click.option("--short-out", default=None, type=int,
              help="Pin short output length (default: ratio of input).")
@click.option("--long-out", default=None, type=int,
              help="Pin long output length (default: ratio of input).")
@click.option("--duration", default=600.0, show_default=True,
              help="Simulated horizon, seconds.")
@click.option("--seed", default=42, show_default=True)
@click.option("--policy", type=click.Choice(["gyges", "rr", "llf"]),
              default="gyges", show_default=True)
@click.option("--hosts", default=1, show_default=True)
@click.option("--gpus-per-host", default=8, show_default=True)
@click.option("--model", "model_name", default="qwen2.5-32b",
              show_default=True, help="Builtin model name or config path.")
@click.option("--threshold", default=0.5, show_default=True,
              help="Scale-down load threshold.")
@click.option("--overlap", default=0.9, show_default=True,
              help="Fraction of transformation cost hidden behind decode.")
@click.option("--stagger", default=1, show_default=True,
              help="Layers transformed per step.")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Metrics output path.")
@click.option("--format", "fmt", type=click.Choice(["csv", "jsonl"]),
              default="csv", show_default=True)
@click.option("--event-log", type=click.Path(), default=None,
              help="JSON-lines event log path.")
def cmd_run(trace, synthetic, short_rate, long_rate, short_len, long_len,
            short_out, long_out, duration, seed, policy, hosts,
            gpus_per_host, model_name, threshold, overlap, stagger,
            out_path, fmt, event_log):
    """Simulate a workload on a transforming cluster."""
    if (trace is None) == (not synthetic):
        raise click.UsageError("pass exactly one of --trace or --synthetic")
    if trace is not None:
        requests = load_trace(trace)
        horizon = duration
    else:
        requests = gen_synthetic(short_rate, long_rate, short_len, long_len,
                                 duration, seed, short_out=short_out,
                                 long_out=long_out)
        horizon = duration
    model = get_model(model_name)
    cluster = ClusterConfig(model, hosts=hosts, gpus_per_host=gpus_per_host)
    sched = SchedulerConfig(policy=policy, scale_down_threshold=threshold)
    cost = CostModel(overlap_fraction=overlap)
    record, events = run_sim(requests, cluster, PerfModel(), sched, cost,
                             stagger_width=stagger, horizon=horizon)
    if out_path:
        write_metrics(record, out_path, fmt)
    if event_log:
        write_event_log(events, event_log)
    rejected = sum(r.rejected for r in record.requests)
    click.echo(f"requests={len(record.requests)} rejected={rejected} "
               f"throughput_tps_mean={record.throughput_tps_mean:.1f} "
               f"transformations={record.transformation_count} "
               f"stall_total_s={record.stall_total_s:.3f} "
               f"peak_gpu_bytes={record.peak_gpu_bytes}")


@main.command("plan-kv")
@click.option("--tokens", default="1024,1024,1024,1024", show_default=True,
              help="Comma-separated resident tokens per TP1 worker.")
@click.option("--headers", default=32, show_default=True)
@click.option("--head-dim", default=128, show_default=True)
@click.option("--block-tokens", default=16, show_default=True)
@click.option("--stages", default=None, type=int,
              help="Stage count for the phased plan (default 2*tp_to).")
@click.option("--mode", type=click.Choice(["inplace", "trim"]),
              default="inplace", show_default=True)
def cmd_plan_kv(tokens, headers, head_dim, block_tokens, stages, mode):
    """Plan a KV-cache merge from N TP1 workers to one TPN instance."""
    counts = [int(t) for t in tokens.split(",")]
    tp_to = len(counts)
    layout = KvLayout(HEADER_CENTRIC_ORDER, block_tokens, headers, head_dim)
    stores = []
    for i, n in enumerate(counts):
        store = KvStore(layout, worker_id=i)
        if n:
            store.add_request(f"w{i}", n)
        stores.append(store)
    if mode == "trim":
        plan = plan_migration_trim(stores, 1, tp_to)
    else:
        plan = plan_migration_inplace(stores, 1, tp_to, stage_count=stages)
    click.echo(plan.serialize())


@main.command("plan-weights")
@click.option("--model", "model_name", default="qwen2.5-32b", show_default=True)
@click.option("--tp-from", default=1, show_default=True)
@click.option("--tp-to", default=4, show_default=True)
@click.option("--overlap", default=0.9, show_default=True)
@click.option("--stagger", default=1, show_default=True)
def cmd_plan_weights(model_name, tp_from, tp_to, overlap, stagger):
    """Print padding plans and the layer-staggered transformation summary."""
    model = get_model(model_name)
    for spec in mlp_tensors(model):
        plan = make_padding_plan(spec, model.supported_tp)
        click.echo(plan.serialize())
    overhead = model_padding_overhead(model, model.supported_tp)
    click.echo(f"model_padding_overhead={float(overhead):.6f}")
    group = ["inst"] * (tp_to // tp_from) if tp_to > tp_from else ["inst"]
    plan = build_plan(group, tp_from, tp_to, model,
                      CostModel(overlap_fraction=overlap),
                      stagger_width=stagger)
    summary = transformation_cost_summary(plan)
    click.echo(f"steps={summary['steps']} "
               f"mlp_bytes={summary['per_phase_bytes_moved']['mlp']} "
               f"kv_bytes={summary['per_phase_bytes_moved']['kv']} "
               f"total_stall_s={summary['total_stall']:.6f}")


@main.command("check-ffn")
@click.option("--cases", default=1000, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--tolerance", default=1e-12, show_default=True)
def cmd_check_ffn(cases, seed, tolerance):
    """Randomized padded-vs-raw FFN equivalence sweep (exits 1 on failure)."""
    rng = np.random.default_rng(seed)
    acts = sorted(ACTIVATIONS)
    worst = 0.0
    for k in range(cases):
        tp = int(rng.choice([1, 2, 4]))
        pad = int(rng.integers(0, 3))
        n, h = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        mid = tp * int(rng.integers(1, 5))
        out = int(rng.integers(1, 5))
        inp = rng.uniform(-1, 1, (n, h))
        up = rng.uniform(-1, 1, (h, mid))
        down = rng.uniform(-1, 1, (mid, out))
        act = acts[k % len(acts)]
        base = ffn(inp, up, down, act)
        u2, d2 = pad_weights(up, down, tp, pad)
        err = float(np.max(np.abs(ffn_padded(inp, u2, d2, act) - base)))
        _, total = shard_ffn(inp, u2, d2, act, tp)
        err = max(err, float(np.max(np.abs(total - base))))
        worst = max(worst, err)
    ok = worst <= tolerance
    click.echo(f"cases={cases} max_abs_error={worst:.3e} "
               f"tolerance={tolerance:.0e} {'OK' if ok else 'FAIL'}")
    if not ok:
        sys.exit(1)


@main.command("tables")
@click.option("--model", "model_name", default="qwen2.5-32b", show_default=True)
def cmd_tables(model_name):
    """Print per-tensor page counts and performance defaults for a model."""
    model = get_model(model_name)
    click.echo(f"model={model.name} layers={model.num_layers} "
               f"weights_gb={model.weights_gb}")
    for spec in mlp_tensors(model):
        for tp in model.supported_tp:
            pages = pages_per_tensor(spec, tp)
            whole = "aligned" if pages.denominator == 1 else "misaligned"
            click.echo(f"  {spec.name} tp={tp} "
                       f"pages_per_shard={Fraction(pages)} "
                       f"(~{float(pages):.5g}) {whole}")
    perf = PerfModel()
    for tp in sorted(perf.throughput_by_tp):
        click.echo(f"  tp={tp} throughput_tps={perf.throughput_by_tp[tp]:g} "
                   f"prefill_tps={perf.prefill_rate_by_tp[tp]:g} "
                   f"kv_capacity_tokens={perf.kv_capacity_by_tp[tp]}")


@main.command("report")
@click.option("--metrics", "metrics_path", type=click.Path(exists=True),
              required=True, help="Metrics CSV from `sim run`.")
@click.option("--out", "out_dir", type=click.Path(), default="report",
              show_default=True)
@click.option("--window", default=10.0, show_default=True,
              help="Throughput window, seconds.")
def cmd_report(metrics_path, out_dir, window):
    """Render latency CDFs and a throughput timeline from a metrics CSV."""
    from .report import render_report

    paths = render_report(metrics_path, out_dir, window_s=window)
    for p in paths:
        click.echo(str(p))


if __name__ == "__main__":
    main()
