import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remapsim.errors import DoubleFree, PressureError, StateError
from remapsim.memory import (KvPool, LayerState, ResidencyMap, alloc_kv, apply_plan, free_kv,
                             kv_blocks, revert_plan)
from remapsim.planner import RemapPlan, plan_remap
from remapsim.types import GiB, KiB, MiB, ModelSpec

BLOCK = 16 * MiB


def _model(n=8, layer_bytes=2 * GiB, kv=160 * KiB, model_id="m"):
    return ModelSpec(model_id, n_layers=n, bytes_per_layer=layer_bytes, t_transfer_per_layer=1000,
                     kv_bytes_per_token_per_layer=kv, max_seq_len=4096)


def _plan(model_id="m"):
    return RemapPlan(model_id, alpha=1, m=2, beta=1, selected_layers=(0, 4))


def test_apply_lends_whole_layers_to_the_pool():
    m = _model()
    res, pool = ResidencyMap([m]), KvPool(base_blocks=200, block_size=BLOCK)
    reload = apply_plan(res, pool, _plan())
    assert pool.total_blocks == 328
    assert reload.nbytes == 0
    states = res.states("m")
    assert states[0] is LayerState.SLOT_SHARED
    assert states[4] is LayerState.RECLAIMED
    assert all(states[i] is LayerState.RESIDENT for i in (1, 2, 3, 5, 6, 7))
    assert res.resident_param_bytes == 7 * 2 * GiB


def test_apply_twice_is_rejected():
    m = _model()
    res, pool = ResidencyMap([m]), KvPool(200, BLOCK)
    apply_plan(res, pool, _plan())
    with pytest.raises(StateError):
        apply_plan(res, pool, _plan())


def test_zero_alpha_plan_is_a_noop():
    m = _model()
    res, pool = ResidencyMap([m]), KvPool(200, BLOCK)
    assert revert_plan(res, pool, "m") == ((), 0)
    assert pool.total_blocks == 200


def test_revert_reloads_the_reclaimed_layer():
    m = _model()
    res, pool = ResidencyMap([m]), KvPool(200, BLOCK)
    apply_plan(res, pool, _plan())
    reload = revert_plan(res, pool, "m", now=5)
    assert reload.layers == (4,) and reload.nbytes == 2 * GiB
    assert pool.total_blocks == 200
    assert all(s is LayerState.RESIDENT for s in res.states("m"))


def test_revert_under_full_pool_raises():
    m = _model()
    res, pool = ResidencyMap([m]), KvPool(200, BLOCK)
    apply_plan(res, pool, _plan())
    assert pool.resize("r", pool.total_blocks) == 0
    with pytest.raises(PressureError):
        revert_plan(res, pool, "m")
    assert pool.total_blocks == 328


def test_kv_block_rounding():
    m = _model(n=40)
    assert kv_blocks(1, m, BLOCK) == 1
    assert kv_blocks(0, m, BLOCK) == 0
    pool = KvPool(10, BLOCK)
    a = alloc_kv(pool, 1, m, owner="r")
    assert a == (1, 0) and pool.held("r") == 1


def test_alloc_reports_shortfall_and_allocates_nothing():
    m = _model(n=40)
    pool = KvPool(3, BLOCK)
    need = kv_blocks(2000, m, BLOCK)
    a = alloc_kv(pool, 2000, m, owner="r")
    assert a.blocks == 0 and a.shortfall == need - 3
    assert pool.used_blocks == 0


def test_double_free():
    pool = KvPool(10, BLOCK)
    pool.resize("r", 2)
    assert free_kv(pool, "r")
    with pytest.raises(DoubleFree):
        free_kv(pool, "r")


def test_release_reports_reversion_threshold():
    pool = KvPool(10, BLOCK, reversion_threshold=0.5)
    pool.resize("a", 5)
    pool.resize("b", 2)
    assert not pool.release("b")  # 5/10 is not below 0.5
    pool.resize("c", 1)
    assert pool.release("a")


@settings(deadline=None)
@given(st.integers(3, 40).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.integers(0, n - 1), min_size=1, max_size=6))))
def test_plan_sequences_conserve_memory(args):
    n, alphas = args
    m = _model(n=n, layer_bytes=4 * BLOCK)
    res, pool = ResidencyMap([m]), KvPool(1000, BLOCK)
    total = n * m.bytes_per_layer + pool.base_blocks * BLOCK
    for a in alphas:
        plan = plan_remap(m, a, t_compute_per_layer=10**6, allow_infeasible=True)
        if plan == res["m"].plan:
            continue
        apply_plan(res, pool, plan)
        assert res.resident_param_bytes + pool.total_blocks * BLOCK == total
        assert sum(s is not LayerState.RESIDENT for s in res.states("m")) == plan.m
    revert_plan(res, pool, "m")
    assert pool.total_blocks == 1000 and res["m"].alpha == 0


def test_round_trip_restores_residency():
    m = _model(n=40, layer_bytes=8 * BLOCK)
    res, pool = ResidencyMap([m]), KvPool(50, BLOCK)
    fresh = ResidencyMap([m])
    apply_plan(res, pool, plan_remap(m, 9, t_compute_per_layer=10**6, allow_infeasible=True))
    revert_plan(res, pool, "m")
    assert res.states("m") == fresh.states("m")
    assert pool.total_blocks == 50
