import pytest
from hypothesis import given
from hypothesis import strategies as st

from remapsim.controller import (Action, Activity, TenantState, controller_step, escalation_size,
                                 remap_limit, select_victim, victim_order)
from remapsim.errors import Exhausted
from remapsim.memory import KvPool
from remapsim.types import GiB, MiB, ModelSelection, ModelSpec, PolicyConfig

BLOCK = 16 * MiB
ACTIVE, INACTIVE = Activity.ACTIVE, Activity.INACTIVE
PRIO = PolicyConfig(model_selection=ModelSelection.PRIORITY)


def _model(model_id="m", n=40, layer_bytes=2 * GiB, t_t=1000):
    return ModelSpec(model_id, n_layers=n, bytes_per_layer=layer_bytes, t_transfer_per_layer=t_t,
                     kv_bytes_per_token_per_layer=1024, max_seq_len=4096)


def _tenant(model_id, activity=INACTIVE, priority=None, last=0, alpha=0, max_alpha=30,
            t_compute=1_000_000):
    return TenantState(model_id, 40, activity=activity, priority=priority, last_active_time=last,
                       remapped_layers=alpha, t_compute=t_compute,
                       t_compute_per_layer=t_compute // 40, max_alpha=max_alpha)


def _tenants(*ts):
    return {t.model_id: t for t in ts}


# ---- escalation_size -----------------------------------------------------------
def test_one_layer_covers_a_small_shortfall():
    assert escalation_size(100, _model(), KvPool(0, BLOCK)) == 1


def test_escalation_covers_the_shortfall_within_the_bound():
    assert escalation_size(300, _model(), KvPool(0, BLOCK), per_step_bound=5) == 3


def test_escalation_is_clipped_by_the_per_step_bound():
    assert escalation_size(300, _model(), KvPool(0, BLOCK), per_step_bound=2) == 2


def test_escalation_is_clipped_by_the_limit():
    assert escalation_size(10_000, _model(), KvPool(0, BLOCK), current_alpha=28, limit=30) == 2
    assert escalation_size(10_000, _model(), KvPool(0, BLOCK), current_alpha=30, limit=30) == 0


# ---- victim selection -------------------------------------------------------------
def test_priority_prefers_lowest_priority_inactive():
    ts = _tenants(_tenant("A", ACTIVE, 1), _tenant("B", INACTIVE, 2), _tenant("C", INACTIVE, 0))
    assert select_victim(ts, PRIO) == "C"


def test_priority_moves_on_when_victim_hits_its_limit():
    ts = _tenants(_tenant("A", ACTIVE, 0), _tenant("B", INACTIVE, 2),
                  _tenant("C", INACTIVE, 1, alpha=30))
    assert victim_order(ts, PRIO) == ["B", "A"]
    ts["B"].remapped_layers = 30
    assert select_victim(ts, PRIO) == "A"


def test_mru_and_lru():
    ts = _tenants(_tenant("A", ACTIVE, last=900), _tenant("B", last=500), _tenant("C", last=100))
    assert select_victim(ts, PolicyConfig(model_selection=ModelSelection.ROUND_ROBIN_MRU)) == "B"
    assert select_victim(ts, PolicyConfig(model_selection=ModelSelection.ROUND_ROBIN_LRU)) == "C"


def test_ties_go_to_lowest_model_id():
    ts = _tenants(_tenant("C"), _tenant("B"))
    assert select_victim(ts, PRIO) == "B"


def test_everyone_at_limit_is_exhausted():
    ts = _tenants(_tenant("A", alpha=30), _tenant("B", alpha=30))
    with pytest.raises(Exhausted):
        select_victim(ts, PolicyConfig())


@given(st.lists(st.integers(0, 10**6), min_size=2, max_size=6, unique=True),
       st.integers(1, 1000), st.sampled_from([ModelSelection.ROUND_ROBIN_MRU,
                                              ModelSelection.ROUND_ROBIN_LRU]))
def test_argmax_is_scale_invariant(times, k, sel):
    pol = PolicyConfig(model_selection=sel)
    base = _tenants(*(_tenant(f"m{i}", last=t) for i, t in enumerate(times)))
    scaled = _tenants(*(_tenant(f"m{i}", last=t * k) for i, t in enumerate(times)))
    assert select_victim(base, pol) == select_victim(scaled, pol)


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 3)), min_size=1, max_size=6))
def test_priority_never_picks_active_while_inactive_available(spec):
    ts = _tenants(*(_tenant(f"m{i}", ACTIVE if a else INACTIVE, p) for i, (a, p) in enumerate(spec)))
    victim = select_victim(ts, PRIO)
    if any(t.activity is INACTIVE for t in ts.values()):
        assert ts[victim].activity is INACTIVE


# ---- controller_step ------------------------------------------------------------------
def _models(*ids):
    return {i: _model(i) for i in ids}


def test_step_escalates_inactive_lowest_priority():
    ts = _tenants(_tenant("A", ACTIVE, 2), _tenant("B", INACTIVE, 1), _tenant("C", INACTIVE, 0))
    dec = controller_step(ts, KvPool(100, BLOCK), 10, models=_models("A", "B", "C"),
                          policy=PRIO)
    assert dec.action is Action.ESCALATE and dec.model_id == "C" and dec.new_alpha == 1


def test_step_reverts_when_pressure_subsides():
    ts = _tenants(_tenant("A", alpha=3), _tenant("B", alpha=2))
    ts["A"].last_remap_time, ts["B"].last_remap_time = 10, 20
    pool = KvPool(100, BLOCK, blocks_from_remap={"A": 384, "B": 256})
    dec = controller_step(ts, pool, 0, models=_models("A", "B"), policy=PolicyConfig(),
                          pressure_subsided=True)
    assert dec.action is Action.REVERT and dec.model_id == "B"
    off = PolicyConfig(reversion_enabled=False)
    assert controller_step(ts, pool, 0, models=_models("A", "B"), policy=off,
                           pressure_subsided=True).action is Action.NOOP


def test_step_never_reverts_into_a_full_pool():
    ts = _tenants(_tenant("A", alpha=1))
    pool = KvPool(10, BLOCK, blocks_from_remap={"A": 128})
    pool.resize("r", 100)
    dec = controller_step(ts, pool, 0, models=_models("A"), policy=PolicyConfig(),
                          pressure_subsided=True)
    assert dec.action is Action.NOOP


def test_step_exhausted_when_all_at_cap():
    models = _models("A")
    ts = _tenants(_tenant("A", alpha=30))
    with pytest.raises(Exhausted):
        controller_step(ts, KvPool(0, BLOCK), 5, models=models,
                        policy=PolicyConfig(enforce_feasibility=False))


def test_remap_limit_respects_cap_and_feasibility():
    m = _model(t_t=1000)
    fast = _tenant("m", t_compute=40 * 10_000)
    assert remap_limit(fast, m, PolicyConfig(remap_cap=0.75)) == 30
    slow = _tenant("m", t_compute=40 * 100)
    assert remap_limit(slow, m, PolicyConfig()) < 30
    assert remap_limit(slow, m, PolicyConfig(enforce_feasibility=False)) == 30


@given(st.integers(1, 5000), st.integers(0, 39), st.floats(0.1, 0.95))
def test_no_escalation_beyond_the_cap(short, alpha, cap):
    pol = PolicyConfig(remap_cap=cap, layers_per_step=None, enforce_feasibility=False)
    limit = pol.max_remapped(40)
    ts = _tenants(_tenant("A", alpha=min(alpha, limit)))
    try:
        dec = controller_step(ts, KvPool(0, BLOCK), short, models=_models("A"), policy=pol)
    except Exhausted:
        assert min(alpha, limit) == limit
        return
    assert dec.new_alpha <= limit
