"""Workload ingestion and synthetic trace generation.

Trace files carry one request per line as `arrival_ms, input_tokens,
output_tokens` (UTF-8, `#` comments and blank lines ignored). The
synthetic generator draws two independent Poisson arrival processes --
short and long requests -- from a single seed, so a (seed, rates,
lengths, duration) tuple fully determines the trace.
"""
from __future__ import annotations

import random
from pathlib import Path

from .errors import EmptyTrace, TraceError
from .scheduler import OUTPUT_INPUT_RATIO, Request


def _default_output(input_tokens: int) -> int:
    return max(1, round(OUTPUT_INPUT_RATIO * input_tokens))


def load_trace(path: str | Path) -> list[Request]:
    """Parse a trace file into requests sorted by arrival time.

    Sorting is stable, so simultaneous arrivals keep their file order.
    """
    requests = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != 3:
                raise TraceError(f"expected 3 fields, got {len(parts)}",
                                 line=lineno)
            try:
                arrival_ms = float(parts[0])
                input_tokens = int(parts[1])
                output_tokens = int(parts[2])
            except ValueError as exc:
                raise TraceError(str(exc), line=lineno) from exc
            if arrival_ms < 0 or input_tokens < 1 or output_tokens < 1:
                raise TraceError("negative or zero field", line=lineno)
            requests.append((arrival_ms / 1000.0, input_tokens, output_tokens))
    if not requests:
        raise EmptyTrace(f"{path} holds no requests")
    requests.sort(key=lambda r: r[0])
    return [Request(f"r{i:04d}", t, inp, out)
            for i, (t, inp, out) in enumerate(requests, start=1)]


def _poisson_arrivals(rate_per_min: float, duration_s: float,
                      rng: random.Random) -> list[float]:
    if rate_per_min <= 0:
        return []
    times, t = [], 0.0
    mean_gap = 60.0 / rate_per_min
    while True:
        t += rng.expovariate(1.0 / mean_gap)
        if t >= duration_s:
            return times
        times.append(t)


def gen_synthetic(short_rate: float, long_rate: float, short_len: int,
                  long_len: int, duration: float, seed: int,
                  short_out: int | None = None,
                  long_out: int | None = None) -> list[Request]:
    """Two-class Poisson workload; rates are queries per minute.

    Output lengths default to the production output/input token ratio
    but can be pinned per class.
    """
    if short_rate < 0 or long_rate < 0:
        raise ValueError("rates must be >= 0")
    # separate streams so one class's draws never perturb the other's
    shorts = _poisson_arrivals(short_rate, duration,
                               random.Random(f"{seed}/short"))
    longs = _poisson_arrivals(long_rate, duration,
                              random.Random(f"{seed}/long"))
    requests = []
    for i, t in enumerate(shorts, start=1):
        requests.append(Request(f"s{i:04d}", t, short_len,
                                short_out or _default_output(short_len)))
    for i, t in enumerate(longs, start=1):
        requests.append(Request(f"l{i:04d}", t, long_len,
                                long_out or _default_output(long_len)))
    requests.sort(key=lambda r: (r.arrival_time, r.id))
    return requests


def write_trace(requests: list[Request], path: str | Path) -> None:
    """Inverse of load_trace (ids are regenerated on reload)."""
    lines = ["# arrival_ms, input_tokens, output_tokens"]
    for r in requests:
        lines.append(f"{r.arrival_time * 1000.0:.3f}, "
                     f"{r.input_tokens}, {r.output_tokens}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
