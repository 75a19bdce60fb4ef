"""Simulator and planning library for lending model-parameter GPU memory to the KV cache."""

from .errors import RemapSimError
from .types import (GH200, H100, CostModel, Engine, GpuConfig, ModelSelection, ModelSpec,
                    MSelection, PolicyConfig, Request, Scenario, SharingKind, SharingMode,
                    model_preset, validate_scenario)

__all__ = ["RemapSimError", "GH200", "H100", "CostModel", "Engine", "GpuConfig",
           "ModelSelection", "ModelSpec", "MSelection", "PolicyConfig", "Request", "Scenario",
           "SharingKind", "SharingMode", "model_preset", "validate_scenario"]
