"""Helpers shared by the experiment scripts."""

import argparse
import csv
import sys
from dataclasses import replace

from remapsim.config import load_scenario
from remapsim.metrics import aggregate
from remapsim.sim import run
from remapsim.workload import build_trace, bundled_path


def parser(doc: str, scenario: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=doc)
    ap.add_argument("--scenario", default=str(bundled_path(scenario)))
    ap.add_argument("--seeds", type=int, default=10, help="run seeds 1..N")
    ap.add_argument("--out", help="also write the per-seed rows as CSV")
    return ap


def sweep_seeds(sf, policies: dict, seeds, workload=None):
    """Yield one row per (seed, policy) with the global summary fields."""
    for seed in seeds:
        trace = build_trace(replace(workload or sf.workload, seed=seed))
        for name, pol in policies.items():
            res = run(sf.scenario, trace, pol, seed)
            yield {"seed": seed, "policy": name, **aggregate(res.records, res.stats)["global"]}


def emit(rows, fields, out=None):
    w = csv.DictWriter(sys.stdout, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if out:
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def mean_by(rows, key, field):
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[field])
    return {k: sum(v) / len(v) for k, v in groups.items()}


__all__ = ["parser", "sweep_seeds", "emit", "mean_by", "load_scenario"]
