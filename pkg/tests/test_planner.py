from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remapsim.errors import InfeasibleAlpha, RangeError, ScaleError
from remapsim.planner import (brute_force_best_placement, choose_m, circular_gaps,
                              feasibility_table, max_feasible_alpha, max_remap_layers,
                              min_circular_gap, plan_remap, stall_free, uniform_placement)
from remapsim.types import GH200, ModelSpec, MSelection, model_preset


def _model(n, t_t=1000):
    return ModelSpec("m", n_layers=n, bytes_per_layer=1 << 30, t_transfer_per_layer=t_t,
                     kv_bytes_per_token_per_layer=1024, max_seq_len=4096)


# ---- max_remap_layers ----------------------------------------------------------
def test_max_remap_layers_examples():
    assert max_remap_layers(10_000, 2_000) == 5
    assert max_remap_layers(1_999, 2_000) == 0
    assert max_remap_layers(0, 2_000) == 0
    assert max_remap_layers(-5, 2_000) == 0


def test_max_remap_layers_rejects_nonpositive_transfer():
    with pytest.raises(RangeError):
        max_remap_layers(100, 0)


def test_prefill_budget_allows_more_layers_than_decode():
    m = model_preset("opt-13b", GH200)
    prefill = max_remap_layers(m.prefill_time(1734), m.t_transfer_per_layer)
    decode = max_remap_layers(m.decode_time(1), m.t_transfer_per_layer)
    assert prefill > decode


# ---- placement --------------------------------------------------------------------
def test_uniform_placement_examples():
    assert uniform_placement(8, 2, 0) == [0, 4]
    assert uniform_placement(8, 8, 0) == list(range(8))
    gaps = circular_gaps(uniform_placement(40, 7, 0), 40)
    assert sorted(gaps) == [5, 5, 6, 6, 6, 6, 6]
    assert min(gaps) == 5


def test_uniform_placement_range():
    with pytest.raises(RangeError):
        uniform_placement(8, 9)
    with pytest.raises(RangeError):
        uniform_placement(8, 0)


def test_min_circular_gap_examples():
    assert min_circular_gap([0, 4], 8) == 4
    assert min_circular_gap([0, 7], 8) == 1
    assert min_circular_gap([0, 13, 27], 40) == 13


def test_min_circular_gap_rejects_bad_placements():
    with pytest.raises(RangeError):
        min_circular_gap([0, 0], 8)
    with pytest.raises(RangeError):
        min_circular_gap([0, 8], 8)


def test_brute_force_examples():
    best, witness = brute_force_best_placement(8, 2)
    assert best == 4 and min_circular_gap(witness, 8) == 4
    assert brute_force_best_placement(12, 5)[0] == 2
    for n in (3, 9, 17):
        assert brute_force_best_placement(n, 1)[0] == n


def test_brute_force_scale_guard():
    with pytest.raises(ScaleError):
        brute_force_best_placement(21, 3)


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 14).flatmap(lambda n: st.tuples(
    st.just(n), st.integers(1, n), st.integers(0, n - 1))))
def test_uniform_matches_oracle_for_any_anchor(args):
    n, m, anchor = args
    assert min_circular_gap(uniform_placement(n, m, anchor), n) == brute_force_best_placement(n, m)[0]


@given(st.integers(3, 200).flatmap(lambda n: st.tuples(
    st.just(n), st.integers(1, n), st.integers(0, 10_000))))
def test_gaps_are_balanced(args):
    n, m, anchor = args
    gaps = circular_gaps(uniform_placement(n, m, anchor), n)
    assert sum(gaps) == n
    assert max(gaps) - min(gaps) <= (0 if n % m == 0 else 1)


@given(st.integers(3, 120).flatmap(lambda n: st.tuples(
    st.just(n), st.integers(1, n), st.integers(0, n - 1))))
def test_rotation_keeps_min_gap(args):
    n, m, shift = args
    base = uniform_placement(n, m, 0)
    rotated = [(p + shift) % n for p in base]
    assert min_circular_gap(rotated, n) == min_circular_gap(base, n)


@given(st.integers(3, 150))
def test_min_gap_non_increasing_in_m(n):
    gaps = [min_circular_gap(uniform_placement(n, m), n) for m in range(1, n + 1)]
    assert all(a >= b for a, b in zip(gaps, gaps[1:]))


# ---- choose_m -----------------------------------------------------------------------
def test_choose_m_examples():
    r = choose_m(40, 9, Fraction(7, 2), 1)
    assert not r.bound_alpha_plus_1 and r.bound_alpha_plus_2
    r = choose_m(40, 1, Fraction(7, 2), 1)
    assert r.bound_alpha_plus_1 and r.m == 2 and r.feasible
    r = choose_m(40, 0, Fraction(7, 2), 1)
    assert r.m == 0 and r.feasible


def test_averaged_bound_switch_point_at_ratio_3_4():
    ms = {a: choose_m(40, a, Fraction(17, 5), 1) for a in range(1, 12)}
    assert all(ms[a].bound_alpha_plus_1 for a in range(1, 9))
    assert not ms[9].bound_alpha_plus_1
    assert ms[9].m == 11 and ms[9].feasible


def test_uneven_gaps_need_the_exact_check():
    # 9 layers on a 40-ring leave gaps of 4 and 5: the averaged bound holds
    # at ratio 3.4 but a 4-gap only offers 3 layers of transfer window.
    r = choose_m(40, 8, Fraction(17, 5), 1)
    assert r.bound_alpha_plus_1 and not r.exact_alpha_plus_1
    assert r.m == 10 and r.feasible


def test_choose_m_fixed_policies():
    r = choose_m(40, 3, 2, 1, MSelection.ALPHA_PLUS_2)
    assert r.m == 5 and r.feasible
    r = choose_m(40, 20, 3, 1, MSelection.ALPHA_PLUS_1)
    assert r.m == 21 and not r.feasible


def test_choose_m_rejects_out_of_range_alpha():
    with pytest.raises(RangeError):
        choose_m(8, 8, 1, 1)


def test_exact_check_implies_averaged_bound():
    for n in range(3, 41):
        for alpha in range(1, n):
            for ratio in (Fraction(1, 2), Fraction(2), Fraction(7, 2), Fraction(6)):
                r = choose_m(n, alpha, ratio, 1)
                assert not r.exact_alpha_plus_1 or r.bound_alpha_plus_1
                assert not r.exact_alpha_plus_2 or r.bound_alpha_plus_2


def test_dynamic_prefers_alpha_plus_1():
    for alpha in range(1, 39):
        for ratio in (Fraction(1, 3), Fraction(3, 2), Fraction(3), Fraction(5)):
            r = choose_m(40, alpha, ratio, 1)
            if r.exact_alpha_plus_1:
                assert r.m == alpha + 1


@given(st.integers(3, 200).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1))))
def test_crossover_algebra(args):
    n, a = args
    eq5 = Fraction(n, a + 2)
    eq4 = Fraction(n - a - 1, a + 1)
    assert (eq5 > eq4) == ((a + 1) * (a + 2) > n)


def test_stall_free_single_slot_matches_gap_condition():
    # Equal gaps: beta=1 is stall-free iff T_T <= (gap - 1) * T_c.
    assert stall_free([4, 4], 1, 3, 1)
    assert not stall_free([4, 4], 1, 4, 1)
    # Link throughput bound over a full cycle.
    assert not stall_free([2, 2, 2, 2], 2, 3, 1)


# ---- plan_remap -------------------------------------------------------------------------
def test_plan_remap_eight_layer_example():
    p = plan_remap(_model(8, 1000), 1, t_compute_per_layer=1000)
    assert (p.m, p.beta, p.selected_layers) == (2, 1, (0, 4))


def test_plan_remap_forty_layers_double_buffers():
    p = plan_remap(_model(40, 3500), 9, t_compute_per_layer=1000)
    assert (p.m, p.beta) == (11, 2)
    assert p.limiting_constraint == "eq5"


def test_plan_remap_errors():
    with pytest.raises(RangeError):
        plan_remap(_model(40), 31, remap_cap=0.75, t_compute_per_layer=10_000)
    with pytest.raises(InfeasibleAlpha):
        plan_remap(_model(40, 100_000), 5, t_compute_per_layer=1000)
    p = plan_remap(_model(40, 100_000), 5, t_compute_per_layer=1000, allow_infeasible=True)
    assert not p.feasible and p.m == 7


def test_plan_remap_zero_alpha():
    p = plan_remap(_model(8), 0)
    assert p.alpha == 0 and p.m == 0 and p.selected_layers == ()


@settings(deadline=None)
@given(st.integers(3, 16).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))))
def test_plan_placement_is_oracle_optimal(args):
    n, alpha = args
    p = plan_remap(_model(n, 1), alpha, t_compute_per_layer=1_000_000, allow_infeasible=True)
    assert min_circular_gap(p.selected_layers, n) == brute_force_best_placement(n, p.m)[0]


def test_max_feasible_alpha_respects_limit():
    assert max_feasible_alpha(40, 1, 1000, 30) == 30
    assert max_feasible_alpha(40, 100_000, 1, 30) == 0
    a = max_feasible_alpha(40, Fraction(7, 2), 1, 39)
    assert choose_m(40, a, Fraction(7, 2), 1).feasible
    assert not choose_m(40, a + 1, Fraction(7, 2), 1).feasible


# ---- feasibility table -----------------------------------------------------------------------
def test_table_low_ratio_everything_feasible():
    rows = feasibility_table(40, Fraction(1, 10), 30)
    assert all(r["feasible"] and r["eq4_ok"] for r in rows)
    # Single-slot cycling needs every gap >= 2, i.e. m <= n/2.
    assert all(r["chosen_m"] == r["alpha"] + 1 for r in rows[1:20])
    assert all(r["chosen_m"] == r["alpha"] + 2 for r in rows[20:])


def test_table_ratio_n_has_no_feasible_alpha():
    rows = feasibility_table(40, 40, 30)
    assert not any(r["feasible"] for r in rows[1:])
