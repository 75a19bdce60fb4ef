"""Discrete-event serving simulator.

Each *lane* is a stream of iterations: one lane for temporal sharing
(models take turns), one lane per model for spatial sharing (lanes run
concurrently with scaled-down compute).  All lanes share one host link.
An iteration is either a prefill of newly admitted requests or one
decode step of the running batch.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum

from ..controller import (Action, Activity, ControllerDecision, TenantState,
                          controller_step)
from ..errors import CapacityError, Exhausted
from ..memory import (KvPool, ResidencyMap, apply_plan, blocks_per_layer,
                      kv_blocks, revert_plan, set_layer_ready, snapshot_rows)
from ..metrics import MetricsRecord
from ..planner import plan_remap, uniform_placement
from ..types import Engine, PolicyConfig, Request, Scenario, SharingKind
from .link import Direction, LinkState
from .timeline import Timeline, make_group, run_layers, iterate_decode_kvswap


class Ev(IntEnum):
    ARRIVAL = 0
    ITERATION_DONE = 1
    ITERATION_START = 2


@dataclass(eq=False)
class ReqState:
    req: Request
    generated: int = 0
    ttft: int | None = None
    last_token: int = 0
    tbts: list = field(default_factory=list)
    recomputes: int = 0
    admitted_seq: int = 0

    @property
    def key(self):
        return self.req.request_id

    @property
    def context(self) -> int:
        return self.req.prompt_len + self.generated


@dataclass
class Tenant:
    spec: object
    state: TenantState
    pool_key: str
    lane: str
    fraction: float = 1.0
    waiting: deque = field(default_factory=deque)
    running: list = field(default_factory=list)
    empty_since: int | None = 0
    swap_layers: int = 0
    swap_group: object = None

    @property
    def has_work(self) -> bool:
        return bool(self.waiting or self.running)


@dataclass
class PoolCtx:
    pool: KvPool
    model_ids: list
    usable_bytes: int
    low_iters: int = 0


@dataclass
class Lane:
    name: str
    model_ids: list
    busy: bool = False
    scheduled: bool = False
    current: int = 0
    turn_iters: int = 0
    last_duration: int = 0


@dataclass
class Iteration:
    lane: str
    model_id: str
    kind: str
    reqs: list
    timeline: Timeline

    @property
    def end(self) -> int:
        return self.timeline.end


@dataclass
class RunResult:
    records: list
    stats: dict
    decisions: list
    events: list
    snapshots: list


class Simulation:
    def __init__(self, scenario: Scenario, trace, policy: PolicyConfig, seed: int = 0, *,
                 record_events: bool = False, record_snapshots: bool = False,
                 check_invariants: bool = True):
        self.scenario = scenario
        self.trace = trace
        self.policy = policy
        self.seed = seed
        self.record_events = record_events
        self.record_snapshots = record_snapshots
        self.check_invariants = check_invariants
        gpu = scenario.gpu
        self.block = gpu.kv_block_size
        self.link = LinkState(gpu.bw_unidirectional, gpu.bw_bidirectional_factor)
        self.residency = ResidencyMap(scenario.models)
        self.models = {m.model_id: m for m in scenario.models}
        mode = scenario.mode
        n_models = len(scenario.models)
        self.pools: dict[str, PoolCtx] = {}
        if mode.kind is SharingKind.SPATIAL_STRICT:
            for m in scenario.models:
                part = scenario.partition_bytes(m.model_id)
                self.pools[m.model_id] = PoolCtx(
                    KvPool((part - m.param_bytes) // self.block, self.block,
                           policy.reversion_threshold), [m.model_id], part)
        else:
            self.pools["gpu"] = PoolCtx(
                KvPool(scenario.free_kv_bytes // self.block, self.block,
                       policy.reversion_threshold), list(self.models), gpu.usable_bytes)
        self.lanes: dict[str, Lane] = {}
        self.tenants: dict[str, Tenant] = {}
        for m in scenario.models:
            pool_key = m.model_id if mode.kind is SharingKind.SPATIAL_STRICT else "gpu"
            lane = m.model_id if mode.spatial else "gpu"
            self.lanes.setdefault(lane, Lane(lane, []))
            self.lanes[lane].model_ids.append(m.model_id)
            self.tenants[m.model_id] = Tenant(
                m, TenantState(m.model_id, m.n_layers, priority=m.priority), pool_key, lane,
                fraction=mode.fraction(m.model_id, n_models))
        self.heap = []
        self.seq = 0
        self.now = 0
        self.admit_seq = 0
        self.records: list[MetricsRecord] = []
        self.decisions: list[dict] = []
        self.events: list[tuple] = []
        self.snapshots: list[dict] = []
        self.stats = {"recompute_events": 0, "stall_us": 0, "iterations": 0,
                      "escalations": 0, "reversions": 0, "skipped_tokens": 0,
                      "reload_bytes": 0}
        self.closed_pending: dict[str, deque] = {}
        self.expected = 0

    # ---- event plumbing -------------------------------------------------
    def push(self, time: int, kind: Ev, payload):
        assert time >= self.now, "event scheduled in the past"
        self.seq += 1
        heapq.heappush(self.heap, (time, self.seq, int(kind), payload))

    def log(self, kind: str, model: str, detail, time: int | None = None, sub: int = 0):
        if self.record_events:
            self.events.append((self.now if time is None else time, self.seq, sub, kind, model,
                                str(detail)))

    # ---- helpers ----------------------------------------------------------
    def pctx(self, model_id: str) -> PoolCtx:
        return self.pools[self.tenants[model_id].pool_key]

    def kv_layers(self, t: Tenant) -> int:
        return t.spec.n_layers - t.swap_layers

    def need_blocks(self, t: Tenant, r: ReqState, tokens: int | None = None) -> int:
        return kv_blocks(r.context if tokens is None else tokens, t.spec, self.block,
                         self.kv_layers(t))

    def scaled(self, t: Tenant, total: int) -> int:
        return total if t.fraction >= 1 else math.ceil(total / t.fraction)

    def decode_total(self, t: Tenant, batch: list) -> int:
        ctx = sum(r.context for r in batch) / len(batch)
        return self.scaled(t, t.spec.decode_time(len(batch), ctx))

    def watermark_blocks(self, pool: KvPool) -> int:
        return math.ceil(self.policy.watermark * pool.total_blocks)

    def max_blocks(self, t: Tenant, ctx: PoolCtx) -> int:
        """Largest pool any single request could ever be given."""
        pool = ctx.pool
        if self.policy.engine is Engine.MIRAGE:
            return pool.base_blocks + sum(
                self.policy.max_remapped(self.models[m].n_layers)
                * blocks_per_layer(self.models[m], self.block) for m in ctx.model_ids)
        return pool.base_blocks

    # ---- run --------------------------------------------------------------
    def run(self) -> RunResult:
        closed = dict(getattr(self.trace, "closed_loop", {}) or {})
        for req in self.trace.requests:
            if req.model_id not in self.tenants:
                raise CapacityError(f"request {req.request_id} targets unknown model {req.model_id}")
            self.expected += 1
            if req.model_id in closed:
                self.closed_pending.setdefault(req.model_id, deque()).append(req)
            else:
                self.push(req.arrival_time, Ev.ARRIVAL, req)
        for model_id, conc in closed.items():
            q = self.closed_pending.get(model_id, deque())
            for _ in range(min(conc, len(q))):
                req = q.popleft()
                self.push(req.arrival_time, Ev.ARRIVAL, req)
        while self.heap:
            time, seq, kind, payload = heapq.heappop(self.heap)
            self.now = time
            if kind == Ev.ARRIVAL:
                self.on_arrival(payload)
            elif kind == Ev.ITERATION_START:
                self.on_iteration_start(payload)
            else:
                self.on_iteration_done(payload)
            if self.check_invariants:
                self.check()
        if len(self.records) != self.expected:
            raise CapacityError(
                f"simulation stalled with {self.expected - len(self.records)} requests unserved")
        self.stats["bytes_h2d"] = self.link.bytes_h2d
        self.stats["bytes_d2h"] = self.link.bytes_d2h
        self.stats["link_busy_us"] = self.link.busy_time
        self.events.sort()
        return RunResult(self.records, self.stats, self.decisions, self.events, self.snapshots)

    def check(self):
        for key, ctx in self.pools.items():
            ctx.pool.check()
            params = sum(self.residency[m].resident_param_bytes for m in ctx.model_ids)
            assert params + ctx.pool.total_blocks * self.block <= ctx.usable_bytes, key

    # ---- handlers ---------------------------------------------------------
    def on_arrival(self, req: Request):
        t = self.tenants[req.model_id]
        t.waiting.append(ReqState(req))
        t.empty_since = None
        t.state.last_active_time = self.now
        self.log("Arrival", req.model_id, req.request_id)
        self.wake(t.lane)

    def wake(self, lane_name: str):
        lane = self.lanes[lane_name]
        if not lane.busy and not lane.scheduled:
            lane.scheduled = True
            self.push(self.now, Ev.ITERATION_START, lane_name)

    def lane_order(self, lane: Lane) -> list[str]:
        ids = lane.model_ids
        k = len(ids)
        if k == 1:
            return [ids[0]] if self.tenants[ids[0]].has_work else []
        mode = self.scenario.mode
        cur = lane.current
        if lane.turn_iters < mode.quantum_iterations and self.tenants[ids[cur]].has_work:
            rotated = [ids[(cur + j) % k] for j in range(k)]
        else:
            rotated = [ids[(cur + 1 + j) % k] for j in range(k)]
        if mode.scheduler == "priority":
            rotated.sort(key=lambda m: -(self.tenants[m].spec.priority or 0))
        return [m for m in rotated if self.tenants[m].has_work]

    def refresh_activity(self, ctx: PoolCtx):
        for m in ctx.model_ids:
            t = self.tenants[m]
            if t.has_work:
                t.state.activity = Activity.ACTIVE
                t.state.last_active_time = self.now
            elif (t.empty_since is not None
                  and self.now - t.empty_since >= self.lanes[t.lane].last_duration):
                t.state.activity = Activity.INACTIVE

    def on_iteration_start(self, lane_name: str):
        lane = self.lanes[lane_name]
        lane.scheduled = False
        if lane.busy:
            return
        self.link.prune(self.now)
        for _ in range(4 * sum(m.n_layers for m in self.scenario.models) + 8):
            progressed = False
            for model_id in self.lane_order(lane):
                it, acted = self.plan_iteration(model_id)
                progressed |= acted
                if it is not None:
                    self.start_iteration(lane, it)
                    return
            if not progressed:
                return

    def start_iteration(self, lane: Lane, it: Iteration):
        idx = lane.model_ids.index(it.model_id)
        if idx != lane.current:
            lane.current, lane.turn_iters = idx, 0
        lane.busy = True
        self.stats["iterations"] += 1
        self.stats["stall_us"] += it.timeline.stall
        self.log("IterationStart", it.model_id, f"{it.kind}:{len(it.reqs)}")
        if self.record_events:
            for sub, (layer, s, e) in enumerate(it.timeline.compute, 1):
                self.log("LayerComputeDone", it.model_id, layer, time=e, sub=sub)
            base = len(it.timeline.compute) + 1
            for sub, (layer, s, e, d) in enumerate(it.timeline.transfers, base):
                self.log("TransferDone", it.model_id, f"{d.value}:{layer}", time=e, sub=sub)
        self.push(it.end, Ev.ITERATION_DONE, it)

    def on_iteration_done(self, it: Iteration):
        t = self.tenants[it.model_id]
        lane = self.lanes[it.lane]
        now = self.now
        for r in it.reqs:
            r.generated += 1
            if r.ttft is None:
                r.ttft = now - r.req.arrival_time
            else:
                r.tbts.append(now - r.last_token)
            r.last_token = now
        if it.kind == "prefill":
            t.running.extend(it.reqs)
        ctx = self.pctx(it.model_id)
        done = [r for r in t.running if r.generated >= r.req.output_len]
        for r in done:
            t.running.remove(r)
            ctx.pool.release(r.key)
            self.complete(r)
        t.state.last_active_time = now
        if not t.has_work:
            t.empty_since = now
        self.log("IterationDone", it.model_id, f"{it.kind}:{len(it.reqs)}")
        waiting = any(self.tenants[m].waiting for m in ctx.model_ids)
        if ctx.pool.utilization < self.policy.reversion_threshold and not waiting:
            ctx.low_iters += 1
        else:
            ctx.low_iters = 0
        lane.busy = False
        lane.turn_iters += 1
        lane.last_duration = it.timeline.duration
        if self.record_snapshots:
            self.snapshots.extend(snapshot_rows(self.stats["iterations"], self.residency, ctx.pool))
        for name in self.lanes:
            self.wake(name)

    def complete(self, r: ReqState):
        self.records.append(MetricsRecord(
            request_id=r.req.request_id, model_id=r.req.model_id, arrival=r.req.arrival_time,
            prompt_len=r.req.prompt_len, output_len=r.req.output_len, ttft=r.ttft,
            tbts=tuple(r.tbts), completion=self.now, recomputes=r.recomputes))
        self.log("RequestDone", r.req.model_id, r.req.request_id)
        q = self.closed_pending.get(r.req.model_id)
        if q:
            nxt = q.popleft()
            self.push(self.now, Ev.ARRIVAL, replace(nxt, arrival_time=max(self.now, nxt.arrival_time)))

    # ---- iteration planning ---------------------------------------------
    def shortfall(self, t: Tenant, pool: KvPool) -> int:
        growth = sum(max(0, self.need_blocks(t, r) - pool.held(r.key)) for r in t.running)
        admit = 0
        if t.waiting and len(t.running) < self.policy.max_batch:
            admit = self.need_blocks(t, t.waiting[0]) + self.watermark_blocks(pool)
        return max(0, growth + admit - pool.free_blocks)

    def refresh_compute(self, ctx: PoolCtx):
        for m in ctx.model_ids:
            t = self.tenants[m]
            st = t.state
            if t.running:
                st.t_compute = self.decode_total(t, t.running)
            elif t.waiting:
                # About to decode: budget for the smallest batch it will run.
                st.t_compute = self.scaled(t, t.spec.decode_time(1, t.waiting[0].context))
            else:
                # Idle: the next thing it runs is a prefill of a typical prompt.
                st.t_compute = self.scaled(t, t.spec.prefill_time(self.policy.nominal_prompt_len))
            st.t_compute_per_layer = max(1, st.t_compute // t.spec.n_layers)

    def plan_iteration(self, model_id: str):
        """Form the next iteration for ``model_id``; returns (iteration or None, controller acted)."""
        t = self.tenants[model_id]
        ctx = self.pctx(model_id)
        pool = ctx.pool
        self.refresh_activity(ctx)
        engine = self.policy.engine
        acted, exhausted = False, False
        short = self.shortfall(t, pool)
        subsided = ctx.low_iters >= 2
        if engine is Engine.MIRAGE and (short or subsided):
            acted, exhausted = self.mirage_control(ctx, short, subsided)
        elif engine is Engine.KV_SWAP and (short or subsided):
            acted, exhausted = self.kvswap_control(t, ctx, short, subsided)
        elif engine is Engine.RECOMPUTE:
            exhausted = True
        it = self.try_prefill(t, ctx)
        if it is None:
            it = self.try_decode(t, ctx, exhausted)
        return it, acted

    def mirage_control(self, ctx: PoolCtx, short: int, subsided: bool):
        self.refresh_compute(ctx)
        states = {m: self.tenants[m].state for m in ctx.model_ids}
        try:
            dec = controller_step(states, ctx.pool, short, models=self.models,
                                  policy=self.policy, pressure_subsided=subsided)
        except Exhausted:
            return False, True
        if dec.action is Action.ESCALATE:
            self.escalate(dec, ctx)
            return True, False
        if dec.action is Action.REVERT:
            self.revert(dec, ctx)
            return True, False
        return False, False

    def record_decision(self, dec: ControllerDecision, before: int, after: int):
        self.decisions.append({"time": self.now, "action": dec.action.value, "model": dec.model_id,
                               "alpha_before": before, "alpha_after": after,
                               "reason": dec.reason})

    def schedule_reload(self, model_id: str, layers):
        spec = self.models[model_id]
        end = self.now
        for layer in layers:
            _, end = self.link.reserve(end, spec.t_transfer_per_layer, spec.bytes_per_layer,
                                       Direction.H2D)
            set_layer_ready(self.residency, model_id, layer, end)
            self.stats["reload_bytes"] += spec.bytes_per_layer

    def escalate(self, dec: ControllerDecision, ctx: PoolCtx):
        st = self.tenants[dec.model_id].state
        spec = self.models[dec.model_id]
        plan = plan_remap(spec, dec.new_alpha, self.policy.m_selection,
                          t_compute_per_layer=st.t_compute_per_layer, allow_infeasible=True)
        before = st.remapped_layers
        reload = apply_plan(self.residency, ctx.pool, plan, anchor=0, now=self.now)
        self.schedule_reload(dec.model_id, reload.layers)
        st.remapped_layers, st.remap_plan, st.last_remap_time = plan.alpha, plan, self.now
        self.stats["escalations"] += 1
        self.record_decision(dec, before, plan.alpha)

    def revert(self, dec: ControllerDecision, ctx: PoolCtx):
        st = self.tenants[dec.model_id].state
        before = st.remapped_layers
        reload = revert_plan(self.residency, ctx.pool, dec.model_id, now=self.now)
        self.schedule_reload(dec.model_id, reload.layers)
        st.remapped_layers, st.remap_plan = 0, None
        ctx.low_iters = 0
        self.stats["reversions"] += 1
        self.record_decision(dec, before, 0)

    # KV-swap: the running model moves more of its own KV layers to host memory.
    def swap_resize(self, t: Tenant, ctx: PoolCtx, layers: int):
        old = t.swap_layers
        t.swap_layers = layers
        for r in t.running:
            ctx.pool.resize(r.key, self.need_blocks(t, r))
        seg = self.segment_bytes(t)
        moved = abs(layers - old) * seg
        if moved:
            d = Direction.D2H if layers > old else Direction.H2D
            self.link.reserve(self.now, self.link.duration(moved, True), moved, d)
        t.swap_group = None
        if layers:
            t.swap_group = make_group(uniform_placement(t.spec.n_layers, layers), 2, self.link,
                                      self.now, self.link.duration(seg, True), seg)

    def segment_bytes(self, t: Tenant) -> int:
        return sum(r.context for r in t.running) * t.spec.kv_bytes_per_token_per_layer

    def kvswap_control(self, t: Tenant, ctx: PoolCtx, short: int, subsided: bool):
        pool = ctx.pool
        n = t.spec.n_layers
        if short:
            cap = self.policy.max_remapped(n)
            if t.swap_layers >= cap or not t.running:
                return False, True
            step = self.policy.layers_per_step or cap
            hi = min(cap, t.swap_layers + step)
            cur = sum(pool.held(r.key) for r in t.running)
            target = hi
            for s in range(t.swap_layers + 1, hi + 1):
                need = sum(kv_blocks(r.context, t.spec, self.block, n - s) for r in t.running)
                if cur - need >= short:
                    target = s
                    break
            dec = ControllerDecision(Action.ESCALATE, t.spec.model_id, target, "kv swap out")
            before = t.swap_layers
            self.swap_resize(t, ctx, target)
            self.stats["escalations"] += 1
            self.record_decision(dec, before, target)
            return True, False
        if subsided and self.policy.reversion_enabled and t.swap_layers:
            extra = sum(kv_blocks(r.context, t.spec, self.block) - pool.held(r.key)
                        for r in t.running)
            if extra <= pool.free_blocks:
                before = t.swap_layers
                self.swap_resize(t, ctx, 0)
                ctx.low_iters = 0
                self.stats["reversions"] += 1
                self.record_decision(ControllerDecision(Action.REVERT, t.spec.model_id, 0,
                                                        "kv swap in"), before, 0)
                return True, False
        return False, False

    def try_prefill(self, t: Tenant, ctx: PoolCtx) -> Iteration | None:
        pool = ctx.pool
        pol = self.policy
        admits, tokens = [], 0
        wm = self.watermark_blocks(pool)
        while t.waiting and len(t.running) + len(admits) < pol.max_batch:
            r = t.waiting[0]
            tok = r.context
            if admits and tokens + tok > pol.max_prefill_tokens:
                break
            need = self.need_blocks(t, r)
            if need + wm > pool.free_blocks:
                if kv_blocks(tok, t.spec, self.block) > self.max_blocks(t, ctx):
                    raise CapacityError(
                        f"request {r.req.request_id} needs more KV than {t.spec.model_id} can ever hold")
                break
            pool.resize(r.key, need)
            t.waiting.popleft()
            self.admit_seq += 1
            r.admitted_seq = self.admit_seq
            admits.append(r)
            tokens += tok
        if not admits:
            return None
        total = self.scaled(t, t.spec.prefill_time(tokens))
        tl = self.timeline(t, total)
        if self.policy.engine is Engine.KV_SWAP and t.swap_layers:
            wb = tokens * t.spec.kv_bytes_per_token_per_layer * t.swap_layers
            _, we = self.link.reserve(tl.end, self.link.duration(wb, True), wb, Direction.D2H)
            tl.end = max(tl.end, we)
        return Iteration(t.lane, t.spec.model_id, "prefill", admits, tl)

    def timeline(self, t: Tenant, total: int, decode_batch: list | None = None) -> Timeline:
        spec = t.spec
        if self.policy.engine is Engine.KV_SWAP:
            if decode_batch is None or not t.swap_layers:
                return run_layers(self.now, spec.n_layers, total, self.link,
                                  record=self.record_events)
            seg = sum(r.context for r in decode_batch) * spec.kv_bytes_per_token_per_layer
            return iterate_decode_kvswap(self.now, spec.n_layers, total, t.swap_group,
                                         self.link, seg, record=self.record_events)
        res = self.residency[spec.model_id]
        ready = {k: v for k, v in res.layer_ready.items() if v > self.now}
        res.layer_ready = ready
        return run_layers(self.now, spec.n_layers, total, self.link, group=res.group,
                          t_fetch=spec.t_transfer_per_layer, fetch_bytes=spec.bytes_per_layer,
                          layer_ready=ready, record=self.record_events)

    def try_decode(self, t: Tenant, ctx: PoolCtx, exhausted: bool) -> Iteration | None:
        pool = ctx.pool
        if not t.running:
            return None
        batch = []
        skipped = []
        for r in sorted(t.running, key=lambda r: r.admitted_seq):
            if r not in t.running:
                continue
            short = pool.resize(r.key, self.need_blocks(t, r))
            if not short:
                batch.append(r)
            elif exhausted:
                self.evict_until_fits(t, ctx, r)
                if r in t.running:
                    batch.append(r)
            else:
                skipped.append(r)
        if not batch and skipped:
            # Remapping could not keep up: fall back to eviction so decode progresses.
            for r in skipped:
                if r in t.running:
                    self.evict_until_fits(t, ctx, r)
                    if r in t.running:
                        batch.append(r)
            skipped = [r for r in skipped if r not in batch]
        self.stats["skipped_tokens"] += len(skipped)
        if not batch:
            return None
        total = self.decode_total(t, batch)
        tl = self.timeline(t, total, batch)
        return Iteration(t.lane, t.spec.model_id, "decode", batch, tl)

    def evict_until_fits(self, t: Tenant, ctx: PoolCtx, r: ReqState):
        """Preempt the latest-admitted requests until ``r`` can grow (possibly ``r`` itself)."""
        pool = ctx.pool
        while pool.resize(r.key, self.need_blocks(t, r)):
            others = [x for m in ctx.model_ids if m != t.spec.model_id
                      and not self.lanes[self.tenants[m].lane].busy
                      for x in self.tenants[m].running]
            cands = t.running if len(t.running) > 1 else others
            if not cands:
                raise CapacityError(f"request {r.req.request_id} cannot fit in the KV pool")
            victim = max(cands, key=lambda x: x.admitted_seq)
            self.evict_and_recompute(victim)
            if victim is r:
                return

    def evict_and_recompute(self, victim: ReqState):
        t = self.tenants[victim.req.model_id]
        ctx = self.pctx(victim.req.model_id)
        t.running.remove(victim)
        ctx.pool.release(victim.key)
        t.waiting.appendleft(victim)
        victim.recomputes += 1
        self.stats["recompute_events"] += 1
        self.log("Evict", victim.req.model_id, victim.req.request_id)


def run(scenario: Scenario, trace, policy: PolicyConfig, seed: int = 0, **kw) -> RunResult:
    """Simulate ``trace`` on ``scenario`` under ``policy`` until every request completes."""
    return Simulation(scenario, trace, policy, seed, **kw).run()
