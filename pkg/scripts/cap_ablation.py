"""Capped remapping against an uncapped, feasibility-blind policy at high load."""

from _common import emit, load_scenario, mean_by, parser, sweep_seeds

if __name__ == "__main__":
    ap = parser(__doc__, "cap_ablation.toml")
    ap.add_argument("--cap", type=float, default=0.75)
    ap.add_argument("--aggressive-cap", type=float, default=0.95)
    args = ap.parse_args()
    sf = load_scenario(args.scenario)
    pols = {"capped": sf.policy.with_(remap_cap=args.cap),
            "aggressive": sf.policy.with_(remap_cap=args.aggressive_cap,
                                          enforce_feasibility=False)}
    rows = list(sweep_seeds(sf, pols, range(1, args.seeds + 1)))
    emit(rows, ["seed", "policy", "tbt_p50_us", "tbt_p99_us", "stall_us", "escalations"],
         args.out)
    for field in ("tbt_p50_us", "tbt_p99_us"):
        print(f"mean {field}: {mean_by(rows, 'policy', field)}")
