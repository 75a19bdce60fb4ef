from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remapsim.planner import plan_remap
from remapsim.sim import (LinkState, iterate_decode_kvswap, iterate_decode_mirage,
                          layer_durations, make_group)
from remapsim.types import GH200, GiB, ModelSpec


def _model(n=40, t_t=1000):
    return ModelSpec("m", n_layers=n, bytes_per_layer=GiB, t_transfer_per_layer=t_t,
                     kv_bytes_per_token_per_layer=1024, max_seq_len=4096)


def _link():
    return LinkState(GH200.bw_unidirectional, GH200.bw_bidirectional_factor)


def test_layer_durations_split_exactly():
    d = layer_durations(1001, 40)
    assert sum(d) == 1001 and max(d) - min(d) <= 1


def test_no_remapping_costs_plain_compute():
    tl = iterate_decode_mirage(500, 40, 40 * 300, 1000, None, _link(), record=True)
    assert tl.duration == 40 * 300 and tl.stall == 0
    assert [c[0] for c in tl.compute] == list(range(40))


def test_bidirectional_rate():
    link = _link()
    assert link.rate() == pytest.approx(427e9, rel=1e-3)
    assert link.rate(bidirectional=True) == pytest.approx(366e9, rel=1e-3)
    assert link.duration(10**9, bidirectional=True) > link.duration(10**9)


def test_link_reservations_never_overlap():
    link = _link()
    spans = [link.reserve(e, d) for e, d in [(0, 100), (50, 100), (10, 20), (400, 10), (0, 5)]]
    spans.sort()
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert link.busy_time == 235


def _steady_state_stall(model, alpha, t_c, iters=5):
    plan = plan_remap(model, alpha, t_compute_per_layer=t_c, allow_infeasible=True)
    link = _link()
    group = make_group(plan.selected_layers, plan.beta, link, 0, model.t_transfer_per_layer)
    t = group.last_transfer_end
    stalls = []
    for _ in range(iters):
        tl = iterate_decode_mirage(t, model.n_layers, model.n_layers * t_c,
                                   model.t_transfer_per_layer, group, link)
        stalls.append(tl.stall)
        t = tl.end
    return plan, stalls


@settings(deadline=None, max_examples=60)
@given(st.integers(1, 29), st.sampled_from([Fraction(1, 2), Fraction(2), Fraction(7, 2), 5]))
def test_feasible_plans_never_stall(alpha, ratio):
    t_c = 1000
    model = _model(t_t=int(ratio * t_c))
    plan, stalls = _steady_state_stall(model, alpha, t_c)
    if plan.feasible:
        assert stalls == [0] * len(stalls)


def test_infeasible_plan_stalls():
    plan, stalls = _steady_state_stall(_model(t_t=20_000), 20, 1000)
    assert not plan.feasible
    assert all(s > 0 for s in stalls)


@settings(deadline=None, max_examples=40)
@given(st.integers(1, 20), st.integers(200, 3000))
def test_kvswap_is_never_faster_than_remapping(alpha, t_c):
    model = _model(t_t=_link().duration(GiB))
    plan = plan_remap(model, alpha, t_compute_per_layer=t_c, allow_infeasible=True)
    ends = []
    for swap in (False, True):
        link = _link()
        g = make_group(plan.selected_layers, plan.beta, link, 0, model.t_transfer_per_layer)
        t = g.last_transfer_end
        for _ in range(3):
            if swap:
                tl = iterate_decode_kvswap(t, 40, 40 * t_c, g, link, GiB)
            else:
                tl = iterate_decode_mirage(t, 40, 40 * t_c, model.t_transfer_per_layer, g, link)
            t = tl.end
        ends.append(t)
    assert ends[1] >= ends[0]
