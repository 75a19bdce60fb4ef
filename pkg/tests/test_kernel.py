import pytest

from remapsim.config import load_scenario, scenario_from_dict
from remapsim.errors import CapacityError
from remapsim.sim import run
from remapsim.types import Engine, Request
from remapsim.workload import Trace, bundled_path, build_trace


def _scenario(hbm="96GiB", models=("A", "B"), **workload):
    raw = {"gpu": {"preset": "GH200", "hbm_capacity": hbm},
           "models": {m: {"preset": "opt-13b"} for m in models},
           "sharing": {"kind": "temporal", "scheduler": "round_robin"},
           "policy": {"engine": "mirage"},
           "workload": {"duration_s": 10, "seed": 3,
                        **{m: {"arrival": "poisson", "rate": 3.0, "lengths": "synthetic-short"}
                           for m in models}, **workload}}
    return scenario_from_dict(raw)


def _key(res):
    return [(r.request_id, r.ttft, r.tbts, r.completion) for r in res.records], res.stats


def test_empty_trace_gives_empty_metrics():
    sf = _scenario()
    res = run(sf.scenario, Trace([]), sf.policy)
    assert res.records == [] and res.stats["iterations"] == 0


def test_runs_are_deterministic():
    sf = _scenario()
    trace = build_trace(sf.workload)
    assert _key(run(sf.scenario, trace, sf.policy, 3)) == _key(run(sf.scenario, trace, sf.policy, 3))


@pytest.mark.parametrize("engine", list(Engine))
def test_every_request_completes_with_all_its_tokens(engine):
    sf = _scenario(hbm="88GiB")
    trace = build_trace(sf.workload)
    res = run(sf.scenario, trace, sf.policy.with_(engine=engine), check_invariants=True)
    by_id = {r.request_id: r for r in res.records}
    assert sorted(by_id) == [r.request_id for r in trace.requests]
    for req in trace.requests:
        rec = by_id[req.request_id]
        assert len(rec.tbts) == req.output_len - 1
        assert rec.ttft > 0 and rec.completion >= req.arrival_time + rec.ttft


def test_single_request_is_engine_independent():
    sf = _scenario(models=("A",))
    trace = Trace([Request(0, "A", 1000, 300, 20)])
    results = {e: _key(run(sf.scenario, trace, sf.policy.with_(engine=e)))[0] for e in Engine}
    assert len({tuple(v) for v in results.values()}) == 1


def test_request_larger_than_all_memory_is_a_capacity_error():
    sf = _scenario(hbm="28.5GiB", models=("A",))
    trace = Trace([Request(0, "A", 0, 4000, 96)])
    with pytest.raises(CapacityError):
        run(sf.scenario, trace, sf.policy.with_(engine=Engine.RECOMPUTE))


def test_pressure_trace_mirage_avoids_recompute():
    sf = load_scenario(bundled_path("pressure_two_model.toml"))
    trace = build_trace(sf.workload)
    mirage = run(sf.scenario, trace, sf.policy)
    base = run(sf.scenario, trace, sf.policy.with_(engine=Engine.RECOMPUTE))
    assert mirage.stats["recompute_events"] == 0 and mirage.stats["escalations"] > 0
    assert base.stats["recompute_events"] >= 1


def test_events_are_time_ordered():
    sf = load_scenario(bundled_path("pressure_two_model.toml"))
    res = run(sf.scenario, build_trace(sf.workload), sf.policy, record_events=True,
              record_snapshots=True)
    times = [e[0] for e in res.events]
    assert times == sorted(times) and res.snapshots
