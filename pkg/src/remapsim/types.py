"""Domain types and unit conventions.

Units are fixed across the package: every time is an integer number of
microseconds and every size is an integer number of bytes.  Bandwidths are
bytes per second.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

from .errors import CapacityError, ConfigError

KiB = 1024
MiB = 1024**2
GiB = 1024**3
US_PER_S = 1_000_000


def transfer_time_us(nbytes: int, bandwidth: float) -> int:
    """Time to move ``nbytes`` over a link of ``bandwidth`` bytes/s, rounded up."""
    if nbytes <= 0:
        return 0
    return math.ceil(nbytes * US_PER_S / bandwidth)


def blocks_for(nbytes: int, block_size: int) -> int:
    return -(-nbytes // block_size)


@dataclass(frozen=True)
class CostModel:
    """Linear latency model for one model on one GPU.

    Decode iteration time is ``decode_base_us + decode_per_seq_us * batch +
    decode_per_ctx_token_us * batch * mean_context``; prefill time is
    ``prefill_base_us + prefill_per_token_us * tokens``.
    """

    decode_base_us: float = 12_000.0
    decode_per_seq_us: float = 160.0
    decode_per_ctx_token_us: float = 0.0
    prefill_base_us: float = 10_000.0
    prefill_per_token_us: float = 70.0

    def __post_init__(self):
        for name in ("decode_base_us", "decode_per_seq_us", "decode_per_ctx_token_us",
                     "prefill_base_us", "prefill_per_token_us"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cost coefficient {name} must be >= 0")

    def decode_time(self, batch: int, mean_context: float = 0.0) -> int:
        t = (self.decode_base_us + self.decode_per_seq_us * batch
             + self.decode_per_ctx_token_us * batch * mean_context)
        return max(1, round(t))

    def prefill_time(self, tokens: int) -> int:
        return max(1, round(self.prefill_base_us + self.prefill_per_token_us * tokens))

    def scaled(self, factor: float) -> CostModel:
        return CostModel(*(getattr(self, f) * factor for f in
                           ("decode_base_us", "decode_per_seq_us", "decode_per_ctx_token_us",
                            "prefill_base_us", "prefill_per_token_us")))


@dataclass(frozen=True)
class ModelSpec:
    """Static description of one tenant model (hidden layers only)."""

    model_id: str
    n_layers: int
    bytes_per_layer: int
    t_transfer_per_layer: int
    kv_bytes_per_token_per_layer: int
    max_seq_len: int
    cost: CostModel = field(default_factory=CostModel)
    priority: Optional[int] = None

    def __post_init__(self):
        if self.n_layers < 3:
            raise ConfigError(f"{self.model_id}: n_layers must be >= 3, got {self.n_layers}")
        for name in ("bytes_per_layer", "t_transfer_per_layer",
                     "kv_bytes_per_token_per_layer", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{self.model_id}: {name} must be positive")

    @property
    def param_bytes(self) -> int:
        return self.n_layers * self.bytes_per_layer

    @property
    def kv_bytes_per_token(self) -> int:
        return self.kv_bytes_per_token_per_layer * self.n_layers

    @property
    def prefill_time_per_token(self) -> float:
        return self.cost.prefill_per_token_us

    def decode_time(self, batch: int, mean_context: float = 0.0) -> int:
        return self.cost.decode_time(batch, mean_context)

    def t_compute_per_layer(self, batch: int, mean_context: float = 0.0) -> int:
        return max(1, self.decode_time(batch, mean_context) // self.n_layers)

    def prefill_time(self, tokens: int) -> int:
        return self.cost.prefill_time(tokens)

    @classmethod
    def from_shape(cls, model_id: str, *, n_layers: int, param_bytes: int,
                   kv_bytes_per_token_per_layer: int, max_seq_len: int,
                   gpu: GpuConfig, cost: CostModel | None = None,
                   priority: int | None = None) -> ModelSpec:
        """Build a spec whose transfer time is derived from ``gpu``'s link."""
        per_layer = param_bytes // n_layers
        return cls(model_id=model_id, n_layers=n_layers, bytes_per_layer=per_layer,
                   t_transfer_per_layer=transfer_time_us(per_layer, gpu.bw_unidirectional),
                   kv_bytes_per_token_per_layer=kv_bytes_per_token_per_layer,
                   max_seq_len=max_seq_len, cost=cost or CostModel(), priority=priority)


@dataclass(frozen=True)
class GpuConfig:
    hbm_capacity: int
    bw_unidirectional: float
    bw_bidirectional_factor: float = 1.0
    kv_block_size: int = 16 * MiB
    reserved_fraction: float = 0.05
    name: str = "custom"

    def __post_init__(self):
        if self.hbm_capacity <= 0 or self.bw_unidirectional <= 0 or self.kv_block_size <= 0:
            raise ConfigError("hbm_capacity, bw_unidirectional and kv_block_size must be positive")
        if not 0 < self.bw_bidirectional_factor <= 1:
            raise ConfigError("bw_bidirectional_factor must lie in (0, 1]")
        if not 0 <= self.reserved_fraction < 1:
            raise ConfigError("reserved_fraction must lie in [0, 1)")

    @property
    def reserve_bytes(self) -> int:
        return math.ceil(self.hbm_capacity * self.reserved_fraction)

    @property
    def usable_bytes(self) -> int:
        return self.hbm_capacity - self.reserve_bytes

    @property
    def bw_bidirectional(self) -> float:
        return self.bw_unidirectional * self.bw_bidirectional_factor


# Measured GH200 host-link rates: ~427 GB/s read-only, ~366 GB/s at 1:1 read/write.
GH200 = GpuConfig(name="GH200", hbm_capacity=96 * GiB, bw_unidirectional=427e9,
                  bw_bidirectional_factor=366 / 427)
H100 = GpuConfig(name="H100", hbm_capacity=80 * GiB, bw_unidirectional=64e9,
                 bw_bidirectional_factor=366 / 427)
GPU_PRESETS = {"GH200": GH200, "H100": H100}

# name -> (n_layers, param bytes, kv bytes/token/layer, max_seq_len, cost scale)
MODEL_SHAPES = {
    "opt-13b": (40, 26 * GiB, 2 * 5120 * 2, 4096, 1.0),
    "llama-2-13b": (40, 26 * GiB, 2 * 5120 * 2, 4096, 1.0),
    "llama-3-8b": (32, 16 * GiB, 2 * 1024 * 2, 8192, 16 / 26),
    "opt-30b": (48, 60 * GiB, 2 * 7168 * 2, 4096, 60 / 26),
    "opt-6.7b": (32, 13 * GiB, 2 * 4096 * 2, 4096, 13 / 26),
}


def model_preset(name: str, gpu: GpuConfig, model_id: str | None = None,
                 priority: int | None = None) -> ModelSpec:
    try:
        n, params, kv, max_len, scale = MODEL_SHAPES[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}") from None
    return ModelSpec.from_shape(model_id or name, n_layers=n, param_bytes=params,
                                kv_bytes_per_token_per_layer=kv, max_seq_len=max_len,
                                gpu=gpu, cost=CostModel().scaled(scale), priority=priority)


@dataclass(frozen=True)
class Request:
    request_id: int
    model_id: str
    arrival_time: int
    prompt_len: int
    output_len: int

    def __post_init__(self):
        if self.prompt_len < 1 or self.output_len < 1:
            raise ConfigError(f"request {self.request_id}: lengths must be >= 1")
        if self.arrival_time < 0:
            raise ConfigError(f"request {self.request_id}: negative arrival time")


class SharingKind(Enum):
    TEMPORAL = "temporal"
    SPATIAL_NON_STRICT = "spatial_non_strict"
    SPATIAL_STRICT = "spatial_strict"


@dataclass(frozen=True)
class SharingMode:
    """How tenants share the GPU.

    ``fractions`` maps model id to its compute (and, for strict mode, HBM)
    share.  ``scheduler`` and ``quantum_iterations`` drive the cross-model
    scheduler used in temporal mode.
    """

    kind: SharingKind = SharingKind.TEMPORAL
    fractions: dict = field(default_factory=dict)
    scheduler: str = "round_robin"
    quantum_iterations: int = 16

    def __post_init__(self):
        if any(f <= 0 or f > 1 for f in self.fractions.values()):
            raise ConfigError("spatial fractions must lie in (0, 1]")
        if sum(self.fractions.values()) > 1 + 1e-9:
            raise ConfigError("spatial fractions sum to more than 1")
        if self.scheduler not in ("round_robin", "priority"):
            raise ConfigError(f"unknown cross-model scheduler {self.scheduler!r}")
        if self.quantum_iterations < 1:
            raise ConfigError("quantum_iterations must be >= 1")

    @property
    def spatial(self) -> bool:
        return self.kind is not SharingKind.TEMPORAL

    def fraction(self, model_id: str, n_models: int) -> float:
        if not self.spatial:
            return 1.0
        return self.fractions.get(model_id, 1.0 / n_models)


class Engine(Enum):
    MIRAGE = "mirage"
    KV_SWAP = "kvswap"
    RECOMPUTE = "recompute"


class ModelSelection(Enum):
    PRIORITY = "priority"
    ROUND_ROBIN_MRU = "mru"
    ROUND_ROBIN_LRU = "lru"


class MSelection(Enum):
    ALPHA_PLUS_1 = "alpha+1"
    ALPHA_PLUS_2 = "alpha+2"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class PolicyConfig:
    engine: Engine = Engine.MIRAGE
    model_selection: ModelSelection = ModelSelection.ROUND_ROBIN_MRU
    remap_cap: float = 0.75
    reversion_enabled: bool = True
    m_selection: MSelection = MSelection.DYNAMIC
    reversion_threshold: float = 0.5
    # None covers the whole shortfall in one step; 1 mirrors one remap per call.
    layers_per_step: Optional[int] = 1
    enforce_feasibility: bool = True
    nominal_prompt_len: int = 512
    max_batch: int = 128
    max_prefill_tokens: int = 8192
    watermark: float = 0.01

    def __post_init__(self):
        if not 0 <= self.remap_cap < 1:
            raise ConfigError(f"remap_cap must lie in [0, 1), got {self.remap_cap}")
        if not 0 < self.reversion_threshold <= 1:
            raise ConfigError("reversion_threshold must lie in (0, 1]")
        if self.layers_per_step is not None and self.layers_per_step < 1:
            raise ConfigError("layers_per_step must be >= 1 or None")
        if self.max_batch < 1 or self.max_prefill_tokens < 1 or self.nominal_prompt_len < 1:
            raise ConfigError("batch limits must be positive")
        if not 0 <= self.watermark < 1:
            raise ConfigError("watermark must lie in [0, 1)")

    def max_remapped(self, n_layers: int) -> int:
        return math.floor(self.remap_cap * n_layers)

    def with_(self, **changes) -> PolicyConfig:
        return replace(self, **changes)


@dataclass(frozen=True)
class Scenario:
    gpu: GpuConfig
    models: tuple
    mode: SharingMode = field(default_factory=SharingMode)

    def model(self, model_id: str) -> ModelSpec:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise KeyError(model_id)

    @property
    def model_ids(self) -> list[str]:
        return [m.model_id for m in self.models]

    @property
    def param_bytes(self) -> int:
        return sum(m.param_bytes for m in self.models)

    @property
    def free_kv_bytes(self) -> int:
        """HBM left for KV once every parameter is resident."""
        return self.gpu.usable_bytes - self.param_bytes

    def partition_bytes(self, model_id: str) -> int:
        """Usable HBM owned by one model under strict spatial sharing."""
        frac = self.mode.fraction(model_id, len(self.models))
        return math.floor(self.gpu.usable_bytes * frac)


def validate_scenario(models, gpu: GpuConfig, mode: SharingMode | None = None,
                      policy: PolicyConfig | None = None) -> Scenario:
    """Check a scenario and return it frozen.

    Raises ConfigError on invariant violations and CapacityError when the
    parameters cannot all be resident at start-up.
    """
    mode = mode or SharingMode()
    models = tuple(models)
    if not models:
        raise ConfigError("scenario has no models")
    ids = [m.model_id for m in models]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate model ids in {ids}")
    unknown = set(mode.fractions) - set(ids)
    if unknown:
        raise ConfigError(f"sharing fractions name unknown models {sorted(unknown)}")
    for m in models:
        derived = m.bytes_per_layer * US_PER_S / gpu.bw_unidirectional
        if abs(m.t_transfer_per_layer - derived) > 0.01 * derived:
            raise ConfigError(
                f"{m.model_id}: t_transfer_per_layer={m.t_transfer_per_layer}us disagrees with "
                f"bytes_per_layer/bw_unidirectional={derived:.1f}us by more than 1%")
    if policy is not None and not 0 <= policy.remap_cap < 1:
        raise ConfigError("remap_cap must lie in [0, 1)")
    scenario = Scenario(gpu=gpu, models=models, mode=mode)
    if mode.kind is SharingKind.SPATIAL_STRICT:
        for m in models:
            if m.param_bytes > scenario.partition_bytes(m.model_id):
                raise CapacityError(f"{m.model_id}: parameters exceed its strict partition")
    elif scenario.param_bytes > gpu.usable_bytes:
        raise CapacityError(
            f"parameters ({scenario.param_bytes} B) exceed usable HBM ({gpu.usable_bytes} B)")
    return scenario
