"""P50 TBT with and without dynamic reversion, at non-peak load and at the peak rate."""

from dataclasses import replace

from _common import emit, load_scenario, mean_by, parser, sweep_seeds

from remapsim.workload import Poisson

if __name__ == "__main__":
    ap = parser(__doc__, "single_model.toml")
    ap.add_argument("--pressure-duration", type=float, default=25.0)
    args = ap.parse_args()
    sf = load_scenario(args.scenario)
    pols = {"reversion": sf.policy.with_(reversion_enabled=True),
            "no-reversion": sf.policy.with_(reversion_enabled=False)}
    seeds = range(1, args.seeds + 1)
    w = sf.workload.models[0]
    peak = max(r for r, _ in w.arrival.segments)
    press = replace(sf.workload, duration_s=args.pressure_duration,
                    models=(replace(w, arrival=Poisson(peak)),))
    rows = [{"load": "non-peak", **r} for r in sweep_seeds(sf, pols, seeds)]
    rows += [{"load": "pressure", **r} for r in sweep_seeds(sf, pols, seeds, press)]
    emit(rows, ["load", "seed", "policy", "tbt_p50_us", "tbt_p99_us", "escalations",
                "reversions"], args.out)
    for load in ("non-peak", "pressure"):
        print(f"{load} mean tbt_p50_us:",
              mean_by([r for r in rows if r["load"] == load], "policy", "tbt_p50_us"))
