"""Compare the three engines on the bundled two-model pressure scenario."""

from _common import emit, load_scenario, mean_by, parser, sweep_seeds

from remapsim.types import Engine

if __name__ == "__main__":
    args = parser(__doc__, "pressure_two_model.toml").parse_args()
    sf = load_scenario(args.scenario)
    pols = {e.value: sf.policy.with_(engine=e) for e in Engine}
    rows = list(sweep_seeds(sf, pols, range(1, args.seeds + 1)))
    emit(rows, ["seed", "policy", "ttft_p99_us", "tbt_p99_us", "throughput_tok_s",
                "recompute_events", "stall_us"], args.out)
    for field in ("ttft_p99_us", "throughput_tok_s"):
        print(f"mean {field}: {mean_by(rows, 'policy', field)}")
