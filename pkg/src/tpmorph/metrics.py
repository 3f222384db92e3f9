"""Serialization of simulation results.

The CSV layout is the stable contract consumed by downstream tooling:
one row per request followed by a blank line and a single-row summary
block. The JSON-lines variant carries the same records one object per
line. Field order and float formatting are fixed so identical runs
produce identical bytes.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

from .simulator import MetricsRecord

REQUEST_COLUMNS = ["request_id", "arrival_s", "placed_instance", "ttft_s",
                   "tpot_s", "completed_s", "rejected"]
SUMMARY_COLUMNS = ["throughput_tps_mean", "transformation_count",
                   "stall_total_s", "peak_gpu_bytes"]


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _request_row(r) -> list[str]:
    return [r.request_id, _fmt(r.arrival_s), r.placed_instance or "",
            _fmt(r.ttft_s), _fmt(r.tpot_s), _fmt(r.completed_s),
            str(int(r.rejected))]


def _summary_row(record: MetricsRecord) -> list[str]:
    return [_fmt(record.throughput_tps_mean),
            str(record.transformation_count),
            _fmt(record.stall_total_s), str(record.peak_gpu_bytes)]


def write_metrics(record: MetricsRecord, path: str | Path,
                  fmt: str = "csv") -> None:
    if fmt == "csv":
        _write_csv(record, path)
    elif fmt == "jsonl":
        _write_jsonl(record, path)
    else:
        raise ValueError(f"unsupported format {fmt!r} (want csv or jsonl)")


def _write_csv(record: MetricsRecord, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(REQUEST_COLUMNS)
        for r in record.requests:
            out.writerow(_request_row(r))
        if record.requests:
            fh.write("\n")
            out.writerow(SUMMARY_COLUMNS)
            out.writerow(_summary_row(record))


def _write_jsonl(record: MetricsRecord, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in record.requests:
            row = dict(zip(REQUEST_COLUMNS, _request_row(r)))
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        if record.requests:
            fh.write(json.dumps(
                dict(zip(SUMMARY_COLUMNS, _summary_row(record))),
                sort_keys=True) + "\n")


def write_event_log(events: list[dict], path: str | Path) -> None:
    """One JSON object per event, keys sorted: byte-stable across runs."""
    with open(path, "w", encoding="utf-8") as fh:
        for entry in events:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def read_metrics_csv(path: str | Path) -> tuple[list[dict], dict]:
    """Inverse of the CSV writer: (request rows, summary dict)."""
    requests: list[dict] = []
    summary: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh)]
    section = "requests"
    for row in rows:
        if not row:
            section = "summary_header"
            continue
        if section == "requests":
            if row == REQUEST_COLUMNS:
                continue
            requests.append(dict(zip(REQUEST_COLUMNS, row)))
        elif section == "summary_header":
            if row != SUMMARY_COLUMNS:
                raise ValueError(f"unexpected summary header {row}")
            section = "summary"
        else:
            summary = dict(zip(SUMMARY_COLUMNS, row))
    return requests, summary
