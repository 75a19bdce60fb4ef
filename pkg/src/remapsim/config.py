"""Scenario files (TOML) and policy strings."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, FileError
from .types import (GPU_PRESETS, CostModel, Engine, GpuConfig, ModelSelection, ModelSpec,
                    MSelection, PolicyConfig, Scenario, SharingKind, SharingMode,
                    model_preset, transfer_time_us, validate_scenario)
from .workload import (BurstyFile, Closed, Fixed, Lognormal, ModelWorkload, Piecewise,
                       Poisson, TraceSpec)

_UNITS = {"": 1, "B": 1, "KiB": 2**10, "MiB": 2**20, "GiB": 2**30,
          "KB": 10**3, "MB": 10**6, "GB": 10**9}


def parse_size(v) -> int:
    """Bytes from an int or a string such as ``"26GiB"`` / ``"160 KB"``."""
    if isinstance(v, int):
        return v
    m = re.fullmatch(r"\s*([0-9.]+)\s*([A-Za-z]*)\s*", str(v))
    if not m or m.group(2) not in _UNITS:
        raise ConfigError(f"cannot parse size {v!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2)])


@dataclass(frozen=True)
class ScenarioFile:
    path: str
    scenario: Scenario
    policy: PolicyConfig
    workload: TraceSpec | None
    raw: dict


def _only(d: dict, allowed: set, where: str):
    extra = set(d) - allowed
    if extra:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(extra)}")


def _gpu(d: dict) -> GpuConfig:
    d = dict(d)
    base = None
    if "preset" in d:
        name = d.pop("preset")
        if name not in GPU_PRESETS:
            raise ConfigError(f"unknown gpu preset {name!r}")
        base = GPU_PRESETS[name]
    fields = {f.name for f in dataclasses.fields(GpuConfig)}
    _only(d, fields, "gpu")
    for k in ("hbm_capacity", "kv_block_size"):
        if k in d:
            d[k] = parse_size(d[k])
    if base is not None:
        return replace(base, **d)
    try:
        return GpuConfig(**d)
    except TypeError as e:
        raise ConfigError(f"[gpu]: {e}") from None


def _cost(d: dict) -> CostModel:
    _only(d, {f.name for f in dataclasses.fields(CostModel)}, "cost")
    return CostModel(**d)


def _model(model_id: str, d: dict, gpu: GpuConfig) -> ModelSpec:
    d = dict(d)
    cost = _cost(d.pop("cost")) if "cost" in d else None
    priority = d.pop("priority", None)
    if "preset" in d:
        preset = d.pop("preset")
        _only(d, set(), f"models.{model_id}")
        m = model_preset(preset, gpu, model_id, priority)
        return replace(m, cost=cost) if cost else m
    allowed = {"n_layers", "bytes_per_layer", "t_transfer_per_layer",
               "kv_bytes_per_token_per_layer", "max_seq_len"}
    _only(d, allowed, f"models.{model_id}")
    missing = allowed - {"t_transfer_per_layer"} - set(d)
    if missing:
        raise ConfigError(f"[models.{model_id}] missing {sorted(missing)}")
    bpl = parse_size(d["bytes_per_layer"])
    return ModelSpec(model_id=model_id, n_layers=int(d["n_layers"]), bytes_per_layer=bpl,
                     t_transfer_per_layer=int(d.get("t_transfer_per_layer",
                                                    transfer_time_us(bpl, gpu.bw_unidirectional))),
                     kv_bytes_per_token_per_layer=parse_size(d["kv_bytes_per_token_per_layer"]),
                     max_seq_len=int(d["max_seq_len"]), cost=cost or CostModel(),
                     priority=priority)


def _enum(cls, value, what: str):
    try:
        return cls(value)
    except ValueError:
        raise ConfigError(f"unknown {what} {value!r}; expected one of "
                          f"{[e.value for e in cls]}") from None


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def policy_from_dict(d: dict, base: PolicyConfig | None = None) -> PolicyConfig:
    base = base or PolicyConfig()
    d = dict(d)
    if "reversion" in d:
        d["reversion_enabled"] = d.pop("reversion")
    fields = {f.name: f for f in dataclasses.fields(PolicyConfig)}
    _only(d, set(fields), "policy")
    out = {}
    for k, v in d.items():
        if k == "engine":
            out[k] = _enum(Engine, v, "engine")
        elif k == "model_selection":
            out[k] = _enum(ModelSelection, v, "model_selection")
        elif k == "m_selection":
            out[k] = _enum(MSelection, v, "m_selection")
        elif k in ("reversion_enabled", "enforce_feasibility"):
            out[k] = _BOOL[str(v).lower()] if isinstance(v, str) else bool(v)
        elif k == "layers_per_step":
            out[k] = None if str(v).lower() in ("none", "all", "0") else int(v)
        elif k in ("remap_cap", "reversion_threshold", "watermark"):
            out[k] = float(v)
        else:
            out[k] = int(v)
    try:
        return base.with_(**out)
    except (TypeError, KeyError) as e:
        raise ConfigError(f"bad policy: {e}") from None


def parse_policy(text: str, base: PolicyConfig | None = None) -> PolicyConfig:
    """``engine[:key=value,...]``, e.g. ``mirage:remap_cap=0.5,reversion=false``."""
    engine, _, rest = text.partition(":")
    d = {"engine": engine.strip()}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        k, eq, v = item.partition("=")
        if not eq:
            raise ConfigError(f"policy option {item!r} is not key=value")
        d[k.strip()] = v.strip()
    return policy_from_dict(d, base)


def _sharing(d: dict) -> SharingMode:
    d = dict(d)
    _only(d, {"kind", "fractions", "scheduler", "quantum_iterations"}, "sharing")
    kind = _enum(SharingKind, d.pop("kind", "temporal"), "sharing kind")
    return SharingMode(kind=kind, **d)


def _workload(d: dict, model_ids) -> TraceSpec:
    d = dict(d)
    duration = float(d.pop("duration_s", 60.0))
    seed = int(d.pop("seed", 0))
    models = []
    for model_id, w in d.items():
        if model_id not in model_ids:
            raise ConfigError(f"[workload.{model_id}] names an unknown model")
        w = dict(w)
        _only(w, {"arrival", "rate", "path", "concurrency", "lengths", "prompt", "output",
                  "prompt_mean", "output_mean", "sigma", "n_requests", "start_s",
                  "max_seq_len", "rates", "durations_s"}, f"workload.{model_id}")
        kind = w.get("arrival", "poisson")
        if kind == "poisson":
            arrival = Poisson(float(w["rate"]))
        elif kind == "bursty":
            arrival = BurstyFile(w.get("path", "bursty_mmpp.csv"), float(w["rate"]))
        elif kind == "piecewise":
            rates, durs = w.get("rates", []), w.get("durations_s", [])
            if len(rates) != len(durs):
                raise ConfigError(f"[workload.{model_id}] rates and durations_s differ in length")
            arrival = Piecewise(tuple((float(r), float(d)) for r, d in zip(rates, durs)))
        elif kind == "closed":
            arrival = Closed(int(w["concurrency"]))
        else:
            raise ConfigError(f"unknown arrival process {kind!r}")
        lengths = w.get("lengths", "synthetic-long")
        if lengths == "fixed":
            lengths = Fixed(int(w["prompt"]), int(w["output"]))
        elif lengths == "lognormal":
            lengths = Lognormal(float(w["prompt_mean"]), float(w["output_mean"]),
                                float(w.get("sigma", 0.4)))
        models.append(ModelWorkload(model_id, arrival, lengths,
                                    n_requests=w.get("n_requests"),
                                    start_s=float(w.get("start_s", 0.0)),
                                    max_seq_len=int(w.get("max_seq_len", 4096))))
    return TraceSpec(tuple(models), duration, seed)


def load_scenario(path) -> ScenarioFile:
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except OSError as e:
        raise FileError(f"cannot read scenario {path}: {e.strerror}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed scenario {path}: {e}") from None
    return scenario_from_dict(raw, str(path))


def scenario_from_dict(raw: dict, path: str = "<dict>") -> ScenarioFile:
    _only(raw, {"gpu", "models", "policy", "sharing", "workload"}, "top level")
    gpu = _gpu(raw.get("gpu", {"preset": "GH200"}))
    models_raw = raw.get("models") or {}
    if not models_raw:
        raise ConfigError("scenario defines no [models.<id>] sections")
    models = [_model(mid, d, gpu) for mid, d in models_raw.items()]
    mode = _sharing(raw.get("sharing", {}))
    policy = policy_from_dict(raw.get("policy", {}))
    scenario = validate_scenario(models, gpu, mode, policy)
    workload = _workload(raw["workload"], scenario.model_ids) if "workload" in raw else None
    return ScenarioFile(path, scenario, policy, workload, raw)


def with_bandwidth_ratio(scenario: Scenario, ratio: float) -> Scenario:
    """Rescale the link so the first model's T_T / T_c at batch 1 equals ``ratio``."""
    if ratio <= 0:
        raise ConfigError("ratio must be > 0")
    first = scenario.models[0]
    t_t = ratio * first.t_compute_per_layer(1)
    bw = first.bytes_per_layer * 1e6 / t_t
    gpu = replace(scenario.gpu, bw_unidirectional=bw)
    models = tuple(replace(m, t_transfer_per_layer=transfer_time_us(m.bytes_per_layer, bw))
                   for m in scenario.models)
    return Scenario(gpu, models, scenario.mode)
