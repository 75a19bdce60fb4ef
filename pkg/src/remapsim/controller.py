"""Remapping controller: decides each iteration whether to lend more
parameter memory to the KV pool, give it back, or do nothing."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .errors import Exhausted
from .memory import KvPool, blocks_per_layer
from .planner import RemapPlan, max_feasible_alpha, max_remap_layers
from .types import ModelSelection, ModelSpec, PolicyConfig


class Activity(Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"


@dataclass
class TenantState:
    model_id: str
    n_layers: int
    activity: Activity = Activity.INACTIVE
    priority: int | None = None
    last_active_time: int = -1
    remapped_layers: int = 0
    remap_plan: RemapPlan | None = None
    # Current compute budget: decode iteration time when active, estimated
    # prefill time when inactive.
    t_compute: int = 0
    t_compute_per_layer: int = 1
    max_alpha: int = 0
    last_remap_time: int = -1

    @property
    def below_cap(self) -> bool:
        return self.remapped_layers < self.max_alpha


class Action(Enum):
    NOOP = "noop"
    ESCALATE = "escalate"
    REVERT = "revert"


@dataclass(frozen=True)
class ControllerDecision:
    action: Action
    model_id: str | None = None
    new_alpha: int | None = None
    reason: str = ""


NOOP = ControllerDecision(Action.NOOP)


def remap_limit(tenant: TenantState, model: ModelSpec, policy: PolicyConfig) -> int:
    """Most layers this tenant may have reclaimed right now."""
    cap = policy.max_remapped(model.n_layers)
    if not policy.enforce_feasibility:
        return cap
    return max_feasible_alpha(model.n_layers, model.t_transfer_per_layer,
                              tenant.t_compute_per_layer, cap, policy.m_selection)


def _priority(t: TenantState) -> int:
    return t.priority if t.priority is not None else 0


def victim_order(tenants, policy: PolicyConfig) -> list[str]:
    """Candidates below their limit, best victim first.

    Inactive tenants always precede active ones.  Within a group: lowest
    priority first (Priority), most recently active first (MRU) or least
    recently active first (LRU); ties go to the lowest model id.
    """
    tenants = tenants.values() if isinstance(tenants, dict) else tenants
    cands = [t for t in tenants if t.below_cap]
    sel = policy.model_selection
    if sel is ModelSelection.PRIORITY:
        key = lambda t: (_priority(t), t.model_id)
    elif sel is ModelSelection.ROUND_ROBIN_MRU:
        key = lambda t: (-t.last_active_time, t.model_id)
    else:
        key = lambda t: (t.last_active_time, t.model_id)
    inactive = sorted((t for t in cands if t.activity is Activity.INACTIVE), key=key)
    active = sorted((t for t in cands if t.activity is Activity.ACTIVE), key=key)
    return [t.model_id for t in inactive + active]


def select_victim(tenants, policy: PolicyConfig) -> str:
    order = victim_order(tenants, policy)
    if not order:
        raise Exhausted("no tenant below its remap limit")
    return order[0]


def escalation_size(shortfall_blocks: int, model: ModelSpec, pool: KvPool, *,
                    current_alpha: int = 0, limit: int | None = None,
                    per_step_bound: int | None = None) -> int:
    """Fewest extra reclaimed layers covering ``shortfall_blocks``, clipped to the bounds."""
    bpl = blocks_per_layer(model, pool.block_size)
    want = math.ceil(shortfall_blocks / bpl) if bpl else 0
    bounds = [want]
    if limit is not None:
        bounds.append(limit - current_alpha)
    if per_step_bound is not None:
        bounds.append(per_step_bound)
    return max(0, min(bounds))


def refresh_limits(tenants: dict, models: dict, policy: PolicyConfig):
    for t in tenants.values():
        t.max_alpha = remap_limit(t, models[t.model_id], policy)


def controller_step(tenants: dict, pool: KvPool, shortfall: int, *, models: dict,
                    policy: PolicyConfig, pressure_subsided: bool = False) -> ControllerDecision:
    """One controller decision for the current scheduler iteration.

    Raises Exhausted when KV is short and every tenant is at its limit.
    """
    if shortfall > 0:
        refresh_limits(tenants, models, policy)
        order = victim_order(tenants, policy)
        if not order:
            raise Exhausted(f"shortfall of {shortfall} blocks with every tenant at its limit")
        for model_id in order:
            t, spec = tenants[model_id], models[model_id]
            bound = policy.layers_per_step
            if policy.enforce_feasibility:
                n = max_remap_layers(t.t_compute, spec.t_transfer_per_layer)
                bound = n if bound is None else min(bound, n)
            delta = escalation_size(shortfall, spec, pool, current_alpha=t.remapped_layers,
                                    limit=t.max_alpha, per_step_bound=bound)
            if delta > 0:
                return ControllerDecision(
                    Action.ESCALATE, model_id, t.remapped_layers + delta,
                    f"kv shortfall {shortfall} blocks; {t.activity.value} victim")
        return ControllerDecision(Action.NOOP, reason=f"shortfall {shortfall} but per-step bound is 0")
    if pressure_subsided and policy.reversion_enabled:
        remapped = [t for t in tenants.values() if t.remapped_layers > 0]
        if remapped:
            t = max(remapped, key=lambda t: (t.last_remap_time, t.model_id))
            if pool.blocks_from_remap.get(t.model_id, 0) <= pool.free_blocks:
                return ControllerDecision(Action.REVERT, t.model_id, 0, "kv pressure subsided")
    return NOOP
