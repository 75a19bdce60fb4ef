"""Serialized host link with first-fit reservations."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum

from ..types import transfer_time_us


class Direction(Enum):
    H2D = "h2d"
    D2H = "d2h"


@dataclass
class LinkState:
    """One channel shared by every transfer on the GPU.

    Reservations are kept as sorted, non-overlapping busy intervals.  A new
    transfer takes the earliest gap at or after its release time that fits
    it, so the link never idles while a released transfer waits.
    """

    bw_unidirectional: float
    bw_bidirectional_factor: float = 1.0
    busy: list = field(default_factory=list)
    bytes_moved: dict = field(default_factory=lambda: {Direction.H2D: 0, Direction.D2H: 0})
    busy_time: int = 0

    @property
    def busy_until(self) -> int:
        return self.busy[-1][1] if self.busy else 0

    def rate(self, bidirectional: bool = False) -> float:
        return self.bw_unidirectional * (self.bw_bidirectional_factor if bidirectional else 1.0)

    def duration(self, nbytes: int, bidirectional: bool = False) -> int:
        return transfer_time_us(nbytes, self.rate(bidirectional))

    def reserve(self, earliest: int, duration: int, nbytes: int = 0,
                direction: Direction = Direction.H2D) -> tuple[int, int]:
        """Book ``duration`` microseconds starting no sooner than ``earliest``."""
        self.bytes_moved[direction] += nbytes
        if duration <= 0:
            return earliest, earliest
        self.busy_time += duration
        busy = self.busy
        i = bisect.bisect_right(busy, (earliest, float("inf")))
        start = earliest
        if i > 0 and busy[i - 1][1] > start:
            start = busy[i - 1][1]
        while i < len(busy) and busy[i][0] < start + duration:
            start = max(start, busy[i][1])
            i += 1
        busy.insert(i, (start, start + duration))
        return start, start + duration

    def prune(self, now: int):
        """Forget intervals that ended before ``now``."""
        k = 0
        while k < len(self.busy) and self.busy[k][1] <= now:
            k += 1
        if k:
            del self.busy[:k]

    @property
    def bytes_h2d(self) -> int:
        return self.bytes_moved[Direction.H2D]

    @property
    def bytes_d2h(self) -> int:
        return self.bytes_moved[Direction.D2H]
