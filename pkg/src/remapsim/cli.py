"""Command-line entry point: ``remapsim {validate,trace,run,plan,sweep}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

from .config import load_scenario, parse_policy, with_bandwidth_ratio
from .errors import ConfigError, FileError, RemapSimError
from .memory import write_snapshots
from .metrics import aggregate, compare, summary_rows, tbt_cdf, write_csv, write_json
from .planner import feasibility_table
from .sim import run as simulate
from .types import GH200, MODEL_SHAPES, MSelection, PolicyConfig, model_preset
from .workload import BurstyFile, Poisson, build_trace, read_trace, write_trace

DEFAULT_POLICIES = ["mirage", "recompute"]
DECISION_FIELDS = ["time", "action", "model", "alpha_before", "alpha_after", "reason"]


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", name)


def _load_trace(sf, trace_path, seed):
    if trace_path:
        return read_trace(trace_path)
    if sf.workload is None:
        raise ConfigError("no --trace given and the scenario has no [workload] section")
    spec = sf.workload if seed is None else replace(sf.workload, seed=seed)
    return build_trace(spec)


def _resolve_seed(sf, seed):
    if seed is not None:
        return seed
    return sf.workload.seed if sf.workload else 0


def _policies(texts, base: PolicyConfig):
    texts = texts or DEFAULT_POLICIES
    out = {}
    for t in texts:
        if t in out:
            continue
        out[t] = parse_policy(t, base)
    return out


def _manifest_hash(scenario_path, trace, policies, seed) -> str:
    man = {"scenario_sha256": _sha(Path(scenario_path).read_bytes()),
           "trace_sha256": trace.sha256, "policies": list(policies), "seed": seed}
    return _sha(json.dumps(man, sort_keys=True).encode())


def _write_rows(path, rows, stamp):
    write_csv(path, rows, header_comment=stamp)


# ---- subcommands ----------------------------------------------------------
def cmd_validate(args) -> int:
    sf = load_scenario(args.scenario)
    sc = sf.scenario
    print(f"ok models={','.join(sc.model_ids)} mode={sc.mode.kind.value} "
          f"usable_bytes={sc.gpu.usable_bytes} free_kv_bytes={sc.free_kv_bytes}")
    return 0


def cmd_trace(args) -> int:
    sf = load_scenario(args.scenario)
    trace = _load_trace(sf, None, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(out, trace)
    print(f"wrote {len(trace.requests)} requests to {out} sha256={trace.sha256}")
    return 0


def run_manifest(scenario_path, trace_path, policy_texts, seed, out_dir, emit_events=False) -> dict:
    """Run every policy on one trace and write all outputs; returns the summary document."""
    sf = load_scenario(scenario_path)
    seed = _resolve_seed(sf, seed)
    trace = _load_trace(sf, trace_path, seed)
    policies = _policies(policy_texts, sf.policy)
    mhash = _manifest_hash(scenario_path, trace, policies, seed)
    stamp = f"manifest_sha256={mhash} seed={seed}"
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FileError(f"cannot create output directory {out}: {e.strerror}") from None
    summaries, cdf_rows = {}, []
    for name, pol in policies.items():
        res = simulate(sf.scenario, trace, pol, seed, record_events=emit_events,
                       record_snapshots=emit_events)
        summaries[name] = aggregate(res.records, res.stats)
        cdf_rows.extend({"policy": name, "latency_us": x, "cdf": round(y, 9)}
                        for x, y in tbt_cdf(res.records))
        write_csv(out / f"decisions_{_safe(name)}.csv", res.decisions, stamp, DECISION_FIELDS)
        if emit_events:
            _write_rows(out / f"events_{_safe(name)}.csv",
                        [{"time": t, "seq": s, "sub": k, "kind": kind, "model": m, "detail": d}
                         for t, s, k, kind, m, d in res.events], stamp)
            write_snapshots(out / f"residency_{_safe(name)}.csv", res.snapshots)
    baseline = "recompute" if "recompute" in summaries else next(iter(summaries))
    cmp_rows = compare(summaries, baseline) if len(summaries) > 1 else []
    doc = {"manifest_sha256": mhash, "seed": seed, "trace_sha256": trace.sha256,
           "scenario": Path(scenario_path).name, "baseline": baseline,
           "policies": summaries, "compare": cmp_rows}
    write_json(out / "summary.json", doc)
    _write_rows(out / "summary.csv", summary_rows(summaries), stamp)
    _write_rows(out / "compare.csv", cmp_rows, stamp)
    _write_rows(out / "tbt_cdf.csv", cdf_rows, stamp)
    return doc


def cmd_run(args) -> int:
    doc = run_manifest(args.scenario, args.trace, args.policy, args.seed, args.out,
                       args.emit_events)
    for name, s in doc["policies"].items():
        g = s["global"]
        print(f"{name}: ttft_p99_us={g['ttft_p99_us']} tbt_p99_us={g['tbt_p99_us']} "
              f"throughput_tok_s={g['throughput_tok_s']} "
              f"recompute_events={g.get('recompute_events', 0)}")
    print(f"wrote {args.out}/summary.json manifest_sha256={doc['manifest_sha256']}")
    return 0


def cmd_plan(args) -> int:
    if args.n_layers:
        n = args.n_layers
    else:
        n = model_preset(args.preset, GH200).n_layers
    cap = args.max_alpha if args.max_alpha is not None else int(args.remap_cap * n)
    rows = feasibility_table(n, Fraction(args.ratio).limit_denominator(10**6), cap,
                             MSelection(args.m_selection))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "eq4_ok", "eq5_ok", "exact_a1_ok", "exact_a2_ok", "feasible",
                "chosen_m", "min_gap"])
    for r in rows:
        gap = r["min_gap"]
        w.writerow([r["alpha"], int(r["eq4_ok"]), int(r["eq5_ok"]), int(r["exact_a1_ok"]),
                    int(r["exact_a2_ok"]), int(r["feasible"]), r["chosen_m"],
                    int(gap) if gap == int(gap) else float(gap)])
    sys.stdout.write(buf.getvalue())
    return 0


def _sweep_point(job):
    scenario_path, trace_path, axis, value, policy_text, seed = job
    try:
        sf = load_scenario(scenario_path)
        seed = _resolve_seed(sf, seed)
        scenario, workload = sf.scenario, sf.workload
        policy = parse_policy(policy_text, sf.policy)
        if axis == "remap_cap":
            policy = policy.with_(remap_cap=value)
        elif axis == "ratio":
            scenario = with_bandwidth_ratio(scenario, value)
        if axis == "rate":
            if trace_path or workload is None:
                raise ConfigError("rate sweeps need a scenario [workload] section")
            models = []
            for w in workload.models:
                a = w.arrival
                if isinstance(a, (Poisson, BurstyFile)):
                    a = replace(a, rate=value)
                models.append(replace(w, arrival=a))
            trace = build_trace(replace(workload, models=tuple(models), seed=seed))
        else:
            trace = _load_trace(sf, trace_path, seed)
        res = simulate(scenario, trace, policy, seed)
        g = aggregate(res.records, res.stats)["global"]
        return {"axis": axis, "value": value, "policy": policy_text, "status": "ok", **g}
    except RemapSimError as e:
        return {"axis": axis, "value": value, "policy": policy_text, "status": f"error={e.code}"}


def cmd_sweep(args) -> int:
    values = []
    for tok in args.values.split(","):
        try:
            v = float(tok)
        except ValueError:
            raise ConfigError(f"sweep value {tok!r} is not a number") from None
        if v in values:
            print(f"warning: duplicate sweep value {tok} ignored", file=sys.stderr)
            continue
        values.append(v)
    sf = load_scenario(args.scenario)
    seed = _resolve_seed(sf, args.seed)
    policies = list(dict.fromkeys(args.policy or ["mirage"]))
    jobs = [(args.scenario, args.trace, args.axis, v, p, seed) for v in values for p in policies]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    rows = [{k: r.get(k, "") for k in keys} for r in rows]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mhash = _sha(json.dumps({"scenario_sha256": _sha(Path(args.scenario).read_bytes()),
                             "axis": args.axis, "values": values, "policies": policies,
                             "seed": seed, "trace": args.trace}, sort_keys=True).encode())
    write_csv(out / "sweep.csv", rows, header_comment=f"manifest_sha256={mhash} seed={seed}")
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"wrote {out}/sweep.csv points={len(rows)} failed={failed}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="remapsim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, trace=True):
        p.add_argument("--scenario", required=True, help="scenario TOML file")
        if trace:
            p.add_argument("--trace", help="trace CSV (default: build from [workload])")
        p.add_argument("--seed", type=int, default=None,
                       help="trace seed (default: [workload] seed, else 0)")

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("trace", help="build the scenario's trace and write it as CSV")
    common(p, trace=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("run", help="simulate one or more policies on one trace")
    common(p)
    p.add_argument("--policy", action="append",
                   help="engine[:key=value,...]; repeatable (default: mirage and recompute)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--emit-events", action="store_true",
                   help="also write the full event log and residency snapshots")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plan", help="print the remap feasibility table as CSV")
    p.add_argument("--preset", default="opt-13b", choices=sorted(MODEL_SHAPES))
    p.add_argument("--n-layers", type=int, help="override the preset's layer count")
    p.add_argument("--ratio", required=True, type=str, help="T_T / T_c, e.g. 3.5")
    p.add_argument("--remap-cap", type=float, default=0.75)
    p.add_argument("--max-alpha", type=int, help="last alpha row (default: cap * n)")
    p.add_argument("--m-selection", default="dynamic", choices=[m.value for m in MSelection])
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("sweep", help="run a policy set across values of one axis")
    common(p)
    p.add_argument("--axis", required=True, choices=["rate", "remap_cap", "ratio"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--policy", action="append")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RemapSimError as e:
        print(f"error={e.code} message={str(e)!r}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error=FileError message={str(e)!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
