"""Latency and throughput summaries over per-request records."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

from .errors import EmptyRun, TraceMismatch


@dataclass(frozen=True)
class MetricsRecord:
    request_id: int
    model_id: str
    arrival: int
    prompt_len: int
    output_len: int
    ttft: int
    tbts: tuple
    completion: int
    recomputes: int = 0


def percentile(values, p: float):
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest value."""
    vals = sorted(values)
    if not vals:
        return None
    rank = max(1, math.ceil(p * len(vals) / 100))
    return vals[rank - 1]


def _row(records) -> dict:
    ttft = [r.ttft for r in records]
    tbt = [x for r in records for x in r.tbts]
    tokens = sum(r.output_len for r in records)
    start = min(r.arrival for r in records)
    end = max(r.completion for r in records)
    makespan = end - start
    return {
        "requests": len(records),
        "tokens": tokens,
        "ttft_p50_us": percentile(ttft, 50),
        "ttft_p99_us": percentile(ttft, 99),
        "tbt_p50_us": percentile(tbt, 50),
        "tbt_p99_us": percentile(tbt, 99),
        "tbt_mean_us": round(sum(tbt) / len(tbt), 3) if tbt else None,
        "makespan_us": makespan,
        "throughput_tok_s": round(tokens * 1e6 / makespan, 6) if makespan > 0 else None,
        "recomputed_requests": sum(1 for r in records if r.recomputes),
    }


def aggregate(records, stats: dict | None = None) -> dict:
    """Global and per-model summary of a completed run."""
    records = sorted(records, key=lambda r: r.request_id)
    if not records:
        raise EmptyRun("no completed requests to summarize")
    summary = {"global": _row(records), "per_model": {}}
    for model_id in sorted({r.model_id for r in records}):
        summary["per_model"][model_id] = _row([r for r in records if r.model_id == model_id])
    for key in ("recompute_events", "stall_us", "bytes_h2d", "bytes_d2h", "escalations",
                "reversions", "iterations", "skipped_tokens", "reload_bytes"):
        if stats and key in stats:
            summary["global"][key] = stats[key]
    return summary


def _delta(new, base):
    if new is None or base is None or base == 0:
        return None
    return round(100.0 * (new - base) / base, 4)


def compare(summaries: dict, baseline: str, trace_hashes: dict | None = None) -> list[dict]:
    """Percentage change of headline metrics for every summary against ``baseline``."""
    if len(summaries) < 2:
        raise EmptyRun("compare needs at least two summaries")
    if trace_hashes and len(set(trace_hashes.values())) > 1:
        raise TraceMismatch(f"summaries come from different traces: {trace_hashes}")
    base = summaries[baseline]["global"]
    rows = []
    for name, s in summaries.items():
        g = s["global"]
        rows.append({
            "policy": name,
            "baseline": baseline,
            "tbt_p99_delta_pct": _delta(g["tbt_p99_us"], base["tbt_p99_us"]),
            "ttft_p99_delta_pct": _delta(g["ttft_p99_us"], base["ttft_p99_us"]),
            "throughput_delta_pct": _delta(g["throughput_tok_s"], base["throughput_tok_s"]),
            "recompute_events": g.get("recompute_events", 0),
        })
    return rows


def tbt_cdf(records) -> list[tuple]:
    """(latency, cumulative fraction) at each distinct TBT value."""
    vals = sorted(x for r in records for x in r.tbts)
    out = []
    for i, v in enumerate(vals):
        if i + 1 == len(vals) or vals[i + 1] != v:
            out.append((v, (i + 1) / len(vals)))
    return out


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_csv(path, rows, header_comment: str | None = None, fieldnames=None):
    rows = list(rows)
    with open(path, "w", newline="") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        if not rows and not fieldnames:
            return
        w = csv.DictWriter(f, fieldnames=fieldnames or list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def summary_rows(summaries: dict) -> list[dict]:
    """Flatten named summaries into table rows (one global row plus one per model)."""
    rows = []
    for name, s in summaries.items():
        rows.append({"policy": name, "model": "*", **s["global"]})
        for model_id, r in s["per_model"].items():
            rows.append({"policy": name, "model": model_id, **r})
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    return [{k: r.get(k, "") for k in keys} for r in rows]
