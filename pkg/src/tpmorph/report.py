"""Figure rendering for finished runs.

Reads a metrics CSV produced by the simulator and renders latency CDFs
and a completion-based throughput timeline as PNG files, next to a small
delimited summary. Kept separate from the simulation output path: the
CSV stays the machine contract, the figures are for humans.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")  # render to files only; no display needed
import matplotlib.pyplot as plt

from .metrics import read_metrics_csv


def _cdf(values: list[float]) -> tuple[list[float], list[float]]:
    xs = sorted(values)
    n = len(xs)
    return xs, [(i + 1) / n for i in range(n)]


def _plot_cdf(values: list[float], title: str, xlabel: str,
              path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if values:
        xs, ys = _cdf(values)
        ax.plot(xs, ys, drawstyle="steps-post")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("fraction of requests")
    ax.set_title(title)
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_timeline(completions: list[tuple[float, float]], window_s: float,
                   path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if completions:
        horizon = max(t for t, _ in completions)
        n = max(1, int(horizon // window_s) + 1)
        buckets = [0.0] * n
        for t, tokens in completions:
            buckets[int(t // window_s)] += tokens
        xs = [(k + 0.5) * window_s for k in range(n)]
        ax.plot(xs, [b / window_s for b in buckets])
    ax.set_xlabel("time (s)")
    ax.set_ylabel("completed tokens/s")
    ax.set_title("throughput (completion-weighted)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(metrics_csv: str | Path, out_dir: str | Path,
                  window_s: float = 10.0,
                  output_tokens: dict[str, int] | None = None) -> list[Path]:
    """Render figures + summary.csv from a metrics file; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    requests, summary = read_metrics_csv(metrics_csv)

    ttfts = [float(r["ttft_s"]) for r in requests if r["ttft_s"]]
    tpots = [float(r["tpot_s"]) for r in requests if r["tpot_s"]]
    completions = []
    for r in requests:
        if r["completed_s"] and r["tpot_s"]:
            # recover the output length from completion span / TPOT
            span = float(r["completed_s"]) - float(r["ttft_s"]) - float(r["arrival_s"])
            tokens = (output_tokens or {}).get(
                r["request_id"], span / float(r["tpot_s"]) if float(r["tpot_s"]) else 0.0)
            completions.append((float(r["completed_s"]), tokens))

    paths = [out / "ttft_cdf.png", out / "tpot_cdf.png",
             out / "throughput_timeline.png", out / "summary.csv"]
    _plot_cdf(ttfts, "time to first token", "TTFT (s)", paths[0])
    _plot_cdf(tpots, "time per output token", "TPOT (s/token)", paths[1])
    _plot_timeline(completions, window_s, paths[2])

    rejected = sum(int(r["rejected"]) for r in requests)
    with open(paths[3], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for key, value in summary.items():
            w.writerow([key, value])
        w.writerow(["requests_total", len(requests)])
        w.writerow(["requests_rejected", rejected])
    return paths
