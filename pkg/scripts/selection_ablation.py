"""Victim selection under round-robin activation: MRU, LRU and static priority."""

from _common import emit, load_scenario, mean_by, parser, sweep_seeds

from remapsim.types import ModelSelection

if __name__ == "__main__":
    args = parser(__doc__, "round_robin_three.toml").parse_args()
    sf = load_scenario(args.scenario)
    pols = {s.value: sf.policy.with_(model_selection=s) for s in ModelSelection}
    rows = list(sweep_seeds(sf, pols, range(1, args.seeds + 1)))
    emit(rows, ["seed", "policy", "ttft_p99_us", "tbt_p99_us", "escalations", "reversions"],
         args.out)
    print("mean ttft_p99_us:", mean_by(rows, "policy", "ttft_p99_us"))
