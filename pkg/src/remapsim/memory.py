"""Block-granular HBM accounting: parameter residency and the KV pool.

Parameter memory of reclaimed layers is lent to the KV pool in whole
blocks.  Layers picked by a ``RemapPlan`` cycle through ``beta`` shared
slots; at any moment ``beta`` of them occupy a slot (``SLOT_SHARED``) and
the remaining ``alpha`` live only in host memory (``RECLAIMED``).
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

from .errors import DoubleFree, PressureError, StateError
from .planner import RemapPlan
from .types import ModelSpec, blocks_for


class LayerState(Enum):
    RESIDENT = "resident"
    SLOT_SHARED = "slot_shared"
    RECLAIMED = "reclaimed"


@dataclass
class Slot:
    layer: int
    ready: int  # time the layer's parameters are in HBM


@dataclass
class SlotGroup:
    """``beta`` slots shared by the plan's selected layers, in execution order.

    ``slots[0]`` holds the next selected layer to execute; a freed slot is
    refilled with ``selected[next_idx]``.  Transfers into the group are
    serialized: ``last_transfer_end`` is when the latest one completes.
    """

    selected: tuple
    beta: int
    slots: deque = field(default_factory=deque)
    next_idx: int = 0
    last_transfer_end: int = 0

    @property
    def occupants(self) -> list[int]:
        return [s.layer for s in self.slots]

    def in_flight(self, now: int):
        late = [(s.layer, s.ready) for s in self.slots if s.ready > now]
        return late[-1] if late else None


class Reload(NamedTuple):
    """Layers whose parameters must be copied back into HBM."""

    layers: tuple
    nbytes: int


@dataclass
class ModelResidency:
    spec: ModelSpec
    plan: RemapPlan
    group: SlotGroup | None = None
    # Resident layers still being reloaded after a revert or re-plan.
    layer_ready: dict = field(default_factory=dict, compare=False)

    @property
    def alpha(self) -> int:
        return self.plan.alpha

    def state(self, layer: int) -> LayerState:
        if self.group is None or layer not in self.group.selected:
            return LayerState.RESIDENT
        return LayerState.SLOT_SHARED if layer in self.group.occupants else LayerState.RECLAIMED

    def in_hbm(self) -> set:
        """Layers whose parameters are (or are on their way to being) in HBM."""
        if self.group is None:
            return set(range(self.spec.n_layers))
        return (set(range(self.spec.n_layers)) - set(self.group.selected)) | set(self.group.occupants)

    @property
    def resident_param_bytes(self) -> int:
        return (self.spec.n_layers - self.alpha) * self.spec.bytes_per_layer


class ResidencyMap:
    def __init__(self, models):
        self.models = {m.model_id: ModelResidency(m, RemapPlan.empty(m.model_id)) for m in models}

    def __getitem__(self, model_id: str) -> ModelResidency:
        return self.models[model_id]

    def __eq__(self, other):
        return isinstance(other, ResidencyMap) and self.models == other.models

    def state(self, model_id: str, layer: int) -> LayerState:
        return self.models[model_id].state(layer)

    def states(self, model_id: str) -> list[LayerState]:
        r = self.models[model_id]
        return [r.state(i) for i in range(r.spec.n_layers)]

    @property
    def resident_param_bytes(self) -> int:
        return sum(r.resident_param_bytes for r in self.models.values())


@dataclass
class KvPool:
    """Whole-block KV capacity, grown by parameter memory lent from remapped layers."""

    base_blocks: int
    block_size: int
    reversion_threshold: float = 0.5
    used_blocks: int = 0
    blocks_from_remap: dict = field(default_factory=dict)
    allocations: dict = field(default_factory=dict)

    @property
    def total_blocks(self) -> int:
        return self.base_blocks + sum(self.blocks_from_remap.values())

    @property
    def free_blocks(self) -> int:
        return self.total_blocks - self.used_blocks

    @property
    def utilization(self) -> float:
        return self.used_blocks / self.total_blocks if self.total_blocks else 1.0

    @property
    def remap_blocks_total(self) -> int:
        return sum(self.blocks_from_remap.values())

    def held(self, owner) -> int:
        return self.allocations.get(owner, 0)

    def resize(self, owner, nblocks: int) -> int:
        """Grow or shrink ``owner``'s holding to ``nblocks``; returns the shortfall (0 on success)."""
        delta = nblocks - self.allocations.get(owner, 0)
        if delta > self.free_blocks:
            return delta - self.free_blocks
        self.used_blocks += delta
        if nblocks:
            self.allocations[owner] = nblocks
        else:
            self.allocations.pop(owner, None)
        return 0

    def release(self, owner) -> bool:
        """Return ``owner``'s blocks; True when utilization sits below the reversion threshold."""
        if owner not in self.allocations:
            raise DoubleFree(f"no KV blocks held by {owner!r}")
        self.used_blocks -= self.allocations.pop(owner)
        return self.utilization < self.reversion_threshold

    def check(self):
        assert 0 <= self.used_blocks <= self.total_blocks, (self.used_blocks, self.total_blocks)
        assert self.used_blocks == sum(self.allocations.values())


class Alloc(NamedTuple):
    blocks: int
    shortfall: int


def kv_blocks(tokens: int, model: ModelSpec, block_size: int, kv_layers: int | None = None) -> int:
    layers = model.n_layers if kv_layers is None else kv_layers
    return blocks_for(tokens * model.kv_bytes_per_token_per_layer * layers, block_size)


def alloc_kv(pool: KvPool, tokens: int, model: ModelSpec, owner=None) -> Alloc:
    """Reserve KV blocks for ``tokens`` tokens of ``model``.

    On success ``owner`` (if given) holds the blocks.  On failure nothing is
    allocated and the result reports the missing blocks.
    """
    need = kv_blocks(tokens, model, pool.block_size)
    if owner is None:
        short = max(0, need - pool.free_blocks)
        if not short:
            pool.used_blocks += need
        return Alloc(0 if short else need, short)
    short = pool.resize(owner, pool.held(owner) + need)
    return Alloc(0 if short else need, short)


def free_kv(pool: KvPool, owner) -> bool:
    return pool.release(owner)


def blocks_per_layer(model: ModelSpec, block_size: int) -> int:
    return model.bytes_per_layer // block_size


def _order_from(selected, anchor: int, n_layers: int) -> list[int]:
    return sorted(selected, key=lambda l: (l - anchor) % n_layers)


def apply_plan(residency: ResidencyMap, pool: KvPool, plan: RemapPlan, anchor: int = 0,
               now: int = 0) -> Reload:
    """Switch ``plan.model_id`` to ``plan``, lending or reclaiming parameter blocks.

    The first ``beta`` selected layers at or after ``anchor`` start in the
    slots.  Returns the layers that must be copied back because the new
    layout keeps them in HBM while the old one had them in host memory.
    """
    r = residency[plan.model_id]
    old = r.plan
    if plan == old:
        raise StateError(f"{plan.model_id}: plan already applied")
    bpl = blocks_per_layer(r.spec, pool.block_size)
    delta = (plan.alpha - old.alpha) * bpl
    if delta < 0 and -delta > pool.free_blocks:
        raise PressureError(f"{plan.model_id}: shrinking remap needs {-delta} free blocks")
    before = r.in_hbm()
    if plan.alpha == 0:
        r.plan, r.group = plan, None
    else:
        order = _order_from(plan.selected_layers, anchor, r.spec.n_layers)
        group = SlotGroup(selected=tuple(order), beta=plan.beta, next_idx=plan.beta % plan.m)
        old_ready = {s.layer: s.ready for s in r.group.slots} if r.group else {}
        for layer in order[:plan.beta]:
            group.slots.append(Slot(layer, old_ready.get(layer, r.layer_ready.get(layer, 0))))
        group.last_transfer_end = r.group.last_transfer_end if r.group else 0
        r.plan, r.group = plan, group
    if plan.alpha:
        pool.blocks_from_remap[plan.model_id] = plan.alpha * bpl
    else:
        pool.blocks_from_remap.pop(plan.model_id, None)
    missing = tuple(sorted(r.in_hbm() - before))
    for layer in missing:
        r.layer_ready[layer] = now
    if r.group:
        for slot in r.group.slots:
            if slot.layer in missing:
                slot.ready = now
    return Reload(missing, len(missing) * r.spec.bytes_per_layer)


def revert_plan(residency: ResidencyMap, pool: KvPool, model_id: str, now: int = 0) -> Reload:
    """Give a model's lent blocks back to its parameters.

    Every selected layer not currently in a slot must be reloaded.
    """
    r = residency[model_id]
    if r.plan.alpha == 0:
        return Reload((), 0)
    lent = pool.blocks_from_remap.get(model_id, 0)
    if lent > pool.free_blocks:
        raise PressureError(f"{model_id}: {lent} lent blocks but only {pool.free_blocks} free")
    return apply_plan(residency, pool, RemapPlan.empty(model_id), now=now)


def set_layer_ready(residency: ResidencyMap, model_id: str, layer: int, ready: int):
    r = residency[model_id]
    r.layer_ready[layer] = ready
    if r.group:
        for slot in r.group.slots:
            if slot.layer == layer:
                slot.ready = ready


def snapshot_rows(tick: int, residency: ResidencyMap, pool: KvPool):
    for model_id, r in residency.models.items():
        yield {"tick": tick, "model": model_id,
               "resident_layers": r.spec.n_layers - r.alpha,
               "reclaimed_layers": r.alpha, "pool_used_blocks": pool.used_blocks}


def write_snapshots(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["tick", "model", "resident_layers",
                                          "reclaimed_layers", "pool_used_blocks"])
        w.writeheader()
        w.writerows(rows)
