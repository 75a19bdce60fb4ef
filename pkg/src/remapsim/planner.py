"""Remap planning: how many layers, which layers, and how many slots.

A model with ``n`` hidden layers runs them as a ring, one pass per decode
iteration.  Reclaiming the memory of ``alpha`` layers leaves room for
``n - alpha`` layers, so ``m = alpha + beta`` layers take turns in ``beta``
shared slots while the other ``n - m`` stay resident.  ``beta = 1`` uses the
least transfer traffic; ``beta = 2`` double-buffers.

Times may be ints (microseconds) or ``fractions.Fraction`` ratios; all
feasibility arithmetic is exact.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

from .errors import InfeasibleAlpha, RangeError, ScaleError
from .types import ModelSpec, MSelection

ORACLE_MAX_LAYERS = 20


def max_remap_layers(t_compute, t_transfer) -> int:
    """Largest N with ``t_transfer * N <= t_compute``."""
    if t_transfer <= 0:
        raise RangeError("t_transfer must be positive")
    if t_compute <= 0:
        return 0
    return math.floor(Fraction(t_compute) / Fraction(t_transfer))


def uniform_placement(n_layers: int, m: int, anchor: int = 0) -> list[int]:
    """Spread ``m`` layers evenly around the ring of ``n_layers``, starting at ``anchor``.

    Offsets are ``floor(i * n / m)``, so gaps are ``floor(n/m)`` or
    ``ceil(n/m)`` and any run of ``q`` consecutive gaps sums to within one
    of ``q * n / m``.
    """
    if not 1 <= m <= n_layers:
        raise RangeError(f"need 1 <= m <= n_layers, got m={m}, n_layers={n_layers}")
    return sorted((anchor + (i * n_layers) // m) % n_layers for i in range(m))


def circular_gaps(placement, n_layers: int) -> list[int]:
    """Gaps ``k_1..k_m`` between consecutive selected layers, wrapping at the end."""
    pts = sorted(placement)
    if not pts:
        raise RangeError("placement must be non-empty")
    return [((pts[(i + 1) % len(pts)] - p - 1) % n_layers) + 1 for i, p in enumerate(pts)]


def min_circular_gap(placement, n_layers: int) -> int:
    pts = sorted(placement)
    if len(set(pts)) != len(pts) or pts[0] < 0 or pts[-1] >= n_layers:
        raise RangeError("placement indices must be distinct and within [0, n_layers)")
    return min(circular_gaps(pts, n_layers))


def brute_force_best_placement(n_layers: int, m: int) -> tuple[int, tuple[int, ...]]:
    """Exhaustive oracle: the best achievable minimum gap over all C(n, m) placements."""
    if n_layers > ORACLE_MAX_LAYERS:
        raise ScaleError(f"oracle limited to n_layers <= {ORACLE_MAX_LAYERS}")
    if not 1 <= m <= n_layers:
        raise RangeError(f"need 1 <= m <= n_layers, got m={m}")
    best, witness = -1, ()
    for combo in itertools.combinations(range(n_layers), m):
        if m == 1:
            gap = n_layers
        else:
            gap = min(min(b - a for a, b in zip(combo, combo[1:])),
                      combo[0] + n_layers - combo[-1])
        if gap > best:
            best, witness = gap, combo
    return best, witness


def stall_free(gaps, beta: int, t_transfer, t_compute_per_layer) -> bool:
    """Exact zero-stall test for a slot group cycling in steady state.

    The transfer of the j-th selected layer may start once the layer ``beta``
    positions earlier finishes computing and must end before its own compute
    starts; transfers share one serial link.  With in-order service that is
    feasible iff every run of ``r`` consecutive transfers fits between the
    first release and the last deadline, i.e.
    ``r * T_T <= (sum of r + beta - 1 consecutive gaps - 1) * T_c``,
    and the link keeps up over a full cycle (``m * T_T <= n * T_c``).
    """
    m = len(gaps)
    n = sum(gaps)
    t_t, t_c = Fraction(t_transfer), Fraction(t_compute_per_layer)
    if m * t_t > n * t_c:
        return False
    ext = list(gaps) * 3
    prefix = [0]
    for g in ext:
        prefix.append(prefix[-1] + g)
    for r in range(1, m + 1):
        span = r + beta - 1
        shortest = min(prefix[i + span] - prefix[i] for i in range(m))
        if r * t_t > (shortest - 1) * t_c:
            return False
    return True


@dataclass(frozen=True)
class FeasibilityReport:
    """Outcome of choosing ``m`` for one ``alpha``.

    ``bound_alpha_plus_1`` / ``bound_alpha_plus_2`` are the closed-form
    averaged bounds; ``exact_alpha_plus_1`` / ``exact_alpha_plus_2`` test the
    actual uniform placement gap by gap.  They agree whenever ``m`` divides
    ``n``; otherwise the exact test can be stricter.
    """

    alpha: int
    m: int
    feasible: bool
    bound_alpha_plus_1: bool
    bound_alpha_plus_2: bool
    exact_alpha_plus_1: bool
    exact_alpha_plus_2: bool
    min_gap_times_tc: Fraction

    @property
    def beta(self) -> int:
        return self.m - self.alpha if self.m else 0

    @property
    def limiting_constraint(self) -> str:
        if self.alpha == 0:
            return "none"
        if not self.feasible:
            return "infeasible"
        return "eq4" if self.beta == 1 else "eq5"


def _exact(n_layers: int, alpha: int, beta: int, t_transfer, t_c) -> bool:
    m = alpha + beta
    if m > n_layers:
        return False
    return stall_free(circular_gaps(uniform_placement(n_layers, m), n_layers), beta, t_transfer, t_c)


@lru_cache(maxsize=65536)
def choose_m(n_layers: int, alpha: int, t_transfer, t_compute_per_layer,
             policy: MSelection = MSelection.DYNAMIC) -> FeasibilityReport:
    """Pick the slot-cycling count ``m`` for ``alpha`` reclaimed layers."""
    t_t, t_c = Fraction(t_transfer), Fraction(t_compute_per_layer)
    if alpha == 0:
        return FeasibilityReport(0, 0, True, True, True, True, True, n_layers * t_c)
    if not 1 <= alpha <= n_layers - 1:
        raise RangeError(f"alpha must lie in [0, {n_layers - 1}], got {alpha}")
    eq4 = t_t * (alpha + 1) <= t_c * (n_layers - alpha - 1)
    eq5 = t_t * (alpha + 2) <= t_c * n_layers
    ex1 = eq4 and _exact(n_layers, alpha, 1, t_t, t_c)
    ex2 = eq5 and _exact(n_layers, alpha, 2, t_t, t_c)
    if policy is MSelection.ALPHA_PLUS_1:
        m, ok = alpha + 1, ex1
    elif policy is MSelection.ALPHA_PLUS_2:
        m, ok = alpha + 2, ex2
    elif ex1:
        m, ok = alpha + 1, True
    elif ex2:
        m, ok = alpha + 2, True
    else:
        # Double buffering stalls least when nothing is stall-free.
        m, ok = alpha + 2, False
    m_gap = min(m, n_layers)
    gap = min_circular_gap(uniform_placement(n_layers, m_gap), n_layers)
    return FeasibilityReport(alpha, m, ok, eq4, eq5, ex1, ex2, gap * t_c)


@dataclass(frozen=True)
class RemapPlan:
    model_id: str
    alpha: int
    m: int
    beta: int
    selected_layers: tuple = ()
    feasible: bool = True
    limiting_constraint: str = "none"
    report: FeasibilityReport | None = field(default=None, compare=False)

    @classmethod
    def empty(cls, model_id: str) -> RemapPlan:
        return cls(model_id=model_id, alpha=0, m=0, beta=0)


def max_feasible_alpha(n_layers: int, t_transfer, t_compute_per_layer, limit: int,
                       policy: MSelection = MSelection.DYNAMIC) -> int:
    """Largest ``a <= limit`` such that every alpha in ``1..a`` is feasible."""
    best = 0
    for alpha in range(1, min(limit, n_layers - 1) + 1):
        if not choose_m(n_layers, alpha, t_transfer, t_compute_per_layer, policy).feasible:
            break
        best = alpha
    return best


def plan_remap(model: ModelSpec, alpha: int, policy: MSelection = MSelection.DYNAMIC, *,
               t_compute_per_layer=None, remap_cap: float | None = None,
               anchor: int = 0, allow_infeasible: bool = False) -> RemapPlan:
    """Compose ``choose_m`` and ``uniform_placement`` into a plan for ``model``.

    ``t_compute_per_layer`` defaults to the batch-1 decode cost.  With
    ``allow_infeasible`` an over-budget alpha still yields a plan (marked
    infeasible) instead of raising.
    """
    if remap_cap is not None and alpha > math.floor(remap_cap * model.n_layers):
        raise RangeError(f"alpha={alpha} exceeds remap cap {remap_cap} of {model.n_layers} layers")
    if alpha == 0:
        return RemapPlan.empty(model.model_id)
    if t_compute_per_layer is None:
        t_compute_per_layer = model.t_compute_per_layer(1)
    report = choose_m(model.n_layers, alpha, model.t_transfer_per_layer, t_compute_per_layer, policy)
    if not report.feasible and not allow_infeasible:
        raise InfeasibleAlpha(
            f"{model.model_id}: alpha={alpha} satisfies neither transfer bound "
            f"(T_T={model.t_transfer_per_layer}, T_c={t_compute_per_layer})")
    m = min(report.m, model.n_layers)
    layers = tuple(uniform_placement(model.n_layers, m, anchor))
    return RemapPlan(model_id=model.model_id, alpha=alpha, m=m, beta=m - alpha,
                     selected_layers=layers, feasible=report.feasible,
                     limiting_constraint=report.limiting_constraint, report=report)


def feasibility_table(n_layers: int, ratio, max_alpha: int,
                      policy: MSelection = MSelection.DYNAMIC) -> list[dict]:
    """Rows of ``choose_m`` outcomes for alpha = 0..max_alpha at ``T_T / T_c = ratio``."""
    ratio = Fraction(ratio)
    rows = []
    for alpha in range(0, min(max_alpha, n_layers - 1) + 1):
        rep = choose_m(n_layers, alpha, ratio, Fraction(1), policy)
        rows.append({
            "alpha": alpha,
            "eq4_ok": rep.bound_alpha_plus_1,
            "eq5_ok": rep.bound_alpha_plus_2,
            "exact_a1_ok": rep.exact_alpha_plus_1,
            "exact_a2_ok": rep.exact_alpha_plus_2,
            "feasible": rep.feasible,
            "chosen_m": rep.m if rep.feasible else "",
            "min_gap": rep.min_gap_times_tc if alpha else n_layers,
        })
    return rows
