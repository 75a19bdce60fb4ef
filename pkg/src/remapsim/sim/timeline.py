"""Per-layer compute/transfer timelines for one iteration.

Layers run in order ``0..n-1``.  A layer starts when the previous one ends
and its inputs (parameters for remapped layers, KV for swapped layers) are
in HBM.  Layers cycling through a ``SlotGroup`` occupy its slots in
execution order: when a layer finishes, its slot is refilled with the next
layer of the group, and the refill goes on the shared link.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..memory import Slot, SlotGroup
from .link import Direction, LinkState


@dataclass
class Timeline:
    start: int
    end: int = 0
    stall: int = 0
    compute: list = field(default_factory=list)    # (layer, start, end)
    transfers: list = field(default_factory=list)  # (layer, start, end, direction)

    @property
    def duration(self) -> int:
        return self.end - self.start


def layer_durations(total: int, n_layers: int) -> list[int]:
    """Split ``total`` into ``n_layers`` near-equal integer parts summing to ``total``."""
    return [total * (i + 1) // n_layers - total * i // n_layers for i in range(n_layers)]


def run_layers(start: int, n_layers: int, total_compute: int, link: LinkState, *,
               group: SlotGroup | None = None, t_fetch: int = 0, fetch_bytes: int = 0,
               t_writeback: int = 0, writeback_bytes: int = 0,
               layer_ready: dict | None = None, record: bool = False) -> Timeline:
    """Simulate one pass over all layers and advance ``group`` in place.

    With ``t_writeback`` set, a slot is only refilled after the finished
    layer's data has been written back (nothing may overwrite it earlier).
    """
    tl = Timeline(start)
    if group is None and not layer_ready and not record:
        tl.end = start + total_compute
        return tl
    selected = set(group.selected) if group is not None else ()
    ready_of = layer_ready or {}
    t = start
    for i, dur in enumerate(layer_durations(total_compute, n_layers)):
        ready = ready_of.get(i, 0)
        sel = i in selected
        if sel:
            slot = group.slots[0]
            assert slot.layer == i, (slot.layer, i)
            ready = max(ready, slot.ready)
        s = max(t, ready)
        tl.stall += s - t
        e = s + dur
        if record:
            tl.compute.append((i, s, e))
        if sel:
            group.slots.popleft()
            free_at = e
            if t_writeback or writeback_bytes:
                ws, we = link.reserve(e, t_writeback, writeback_bytes, Direction.D2H)
                free_at = we
                if record:
                    tl.transfers.append((i, ws, we, Direction.D2H))
            nxt = group.selected[group.next_idx]
            group.next_idx = (group.next_idx + 1) % len(group.selected)
            fs, fe = link.reserve(max(free_at, group.last_transfer_end), t_fetch,
                                  fetch_bytes, Direction.H2D)
            group.last_transfer_end = fe
            group.slots.append(Slot(nxt, fe))
            if record:
                tl.transfers.append((nxt, fs, fe, Direction.H2D))
        t = e
    tl.end = t
    return tl


def iterate_decode_mirage(start: int, n_layers: int, total_compute: int, t_transfer: int,
                          group: SlotGroup | None, link: LinkState, *, bytes_per_layer: int = 0,
                          layer_ready: dict | None = None, record: bool = False) -> Timeline:
    """One decode pass with remapped layers streamed in over the link (read-only traffic)."""
    return run_layers(start, n_layers, total_compute, link, group=group, t_fetch=t_transfer,
                      fetch_bytes=bytes_per_layer, layer_ready=layer_ready, record=record)


def iterate_decode_kvswap(start: int, n_layers: int, total_compute: int,
                          group: SlotGroup | None, link: LinkState, segment_bytes: int, *,
                          record: bool = False) -> Timeline:
    """One decode pass with the KV of ``group.selected`` layers held in host memory.

    Each swapped layer's KV is fetched before it runs and written back
    after; with traffic in both directions the link runs at the reduced
    bidirectional rate.
    """
    if group is None or not group.selected:
        return run_layers(start, n_layers, total_compute, link, record=record)
    t_seg = link.duration(segment_bytes, bidirectional=True)
    return run_layers(start, n_layers, total_compute, link, group=group, t_fetch=t_seg,
                      fetch_bytes=segment_bytes, t_writeback=t_seg,
                      writeback_bytes=segment_bytes, record=record)


def make_group(selected, beta: int, link: LinkState, now: int, t_fetch: int,
               fetch_bytes: int = 0, record: list | None = None) -> SlotGroup:
    """Fresh slot group whose first ``beta`` layers are fetched starting at ``now``."""
    selected = tuple(selected)
    beta = min(beta, len(selected))
    g = SlotGroup(selected=selected, beta=beta, next_idx=beta % len(selected))
    end = now
    for layer in selected[:beta]:
        s, end = link.reserve(end, t_fetch, fetch_bytes, Direction.H2D)
        g.slots.append(Slot(layer, end))
        if record is not None:
            record.append((layer, s, end, Direction.H2D))
    g.last_transfer_end = end
    return g
