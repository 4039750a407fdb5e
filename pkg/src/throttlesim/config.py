"""Run specification: one YAML/JSON document describing an experiment.

Unknown keys are rejected. Every field has a default, so an empty document is
a valid specification (synthetic trace, reference surrogate, largest engine).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .perfmodel import (EngineProfile, FrequencyDomain, GridPerfModel, PowerParams, ReferencePowerModel,
                        SurrogateParams, SurrogatePerfModel, check_profiles, load_defaults)
from .scheduler import PrefillModel, SloConfig
from .simcore import SimConfig
from .trace import (LengthDist, PredictorConfig, Query, RpsProfile, TraceSpec, assign_predictions, load_trace,
                    scale_trace, shape_trace, synthesize_trace)

_D = load_defaults()


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LengthSpec(_Strict):
    median: float = Field(gt=0, description="median tokens of the log-normal")
    sigma: float = Field(ge=0, description="log-space standard deviation")


class SyntheticSpec(_Strict):
    duration: float = Field(600.0, gt=0, description="seconds of arrivals")
    rps: Optional[float] = Field(4.0, gt=0, description="constant arrival rate; ignored when profile is set")
    profile: Optional[List[Tuple[float, float]]] = Field(None, description="(time_s, rps) breakpoints")
    kind: Literal["constant", "step", "linear"] = Field("linear", description="interpolation of profile")
    prompt: LengthSpec = LengthSpec(**_D["trace"]["prompt"])
    gen: LengthSpec = LengthSpec(**_D["trace"]["gen"])


class TraceSection(_Strict):
    file: Optional[str] = Field(None, description="CSV trace (arrival_ms,prompt,output); overrides synthetic")
    synthetic: SyntheticSpec = SyntheticSpec()
    scale_peak: Optional[float] = Field(None, gt=0, description="rescale arrivals to this peak RPS")
    shape: Optional[Tuple[float, float]] = Field(None, description="map binned RPS range onto [low, high]")
    bin_seconds: float = Field(60.0, gt=0, description="bin width for scale_peak/shape")
    max_tokens: int = Field(_D["trace"]["max_tokens"], ge=2, description="sequence length limit")


class PredictorSection(_Strict):
    mode: Literal["oracle", "noisy"] = "oracle"
    p95_error: float = Field(0.0, ge=0, description="95th-percentile relative length error")
    conservative_factor: Optional[float] = Field(None, ge=0, description="inflation; null = p95_error")


class SurrogateSection(_Strict):
    amplitude: dict = Field(default_factory=lambda: dict(_D["surrogate"]["amplitude"]),
                            description="peak IPS per tp at f_max with an empty batch")
    alpha: float = _D["surrogate"]["alpha"]
    gamma: float = _D["surrogate"]["gamma"]
    kappa: float = _D["surrogate"]["kappa"]


class PowerSection(_Strict):
    idle: float = Field(_D["power"]["idle"], gt=0, description="per-GPU watts at zero dynamic load")
    c1: float = Field(_D["power"]["c1"], ge=0, description="watts of the cubic frequency term")
    c2: float = Field(_D["power"]["c2"], ge=0, description="watts per KV block per GPU at f_max")


class ModelSection(_Strict):
    kind: Literal["surrogate", "grid"] = "surrogate"
    grid_file: Optional[str] = Field(None, description="fitted table written by `calibrate`")
    surrogate: SurrogateSection = SurrogateSection()
    power: PowerSection = PowerSection()

    @model_validator(mode="after")
    def _grid_needs_file(self):
        if self.kind == "grid" and not self.grid_file:
            raise ValueError("model.kind 'grid' requires model.grid_file")
        return self


class ProfileSpec(_Strict):
    tp: int = Field(gt=0)
    max_load_rps: float = Field(gt=0)
    e2e_slo: float = Field(gt=0)
    kv_capacity: int = Field(gt=0)
    spawn_time: float = Field(20.0, gt=0)


class SloSection(_Strict):
    tbt: float = Field(_D["slo"]["tbt"], gt=0, description="average time-between-tokens target (s)")
    e2e: Optional[float] = Field(None, gt=0, description="per-query latency target (s); null = engine profile")


class PrefillSection(_Strict):
    enabled: bool = _D["sim"]["prefill"]["enabled"]
    base_latency: float = Field(_D["sim"]["prefill"]["base_latency"], ge=0)
    reference_prompt: int = Field(_D["sim"]["prefill"]["reference_prompt"], gt=0)


class SimSection(_Strict):
    engine_tp: Optional[int] = Field(None, description="fixed (or starting) engine; null = largest profile")
    autoscale: bool = True
    baseline: bool = False
    throttle: bool = True
    throttle_on_admission_only: bool = Field(False, description="re-select frequency on admissions only")
    queue_bypass: bool = Field(True, description="maximum frequency while requests are queued")
    switch_latency: float = Field(_D["sim"]["switch_latency"], ge=0)
    tokens_per_block: int = Field(_D["sim"]["tokens_per_block"], ge=1)
    monitor_window: float = Field(_D["sim"]["monitor_window"], gt=0)
    prefill: PrefillSection = PrefillSection()


class SweepSection(_Strict):
    tp: int = Field(1, gt=0)
    batches: List[int] = Field(default_factory=lambda: list(range(1, 33)))
    prompt_tokens: int = Field(1, ge=1)
    gen_tokens: int = Field(1024, ge=1)


class DatasetSection(_Strict):
    ips_file: Optional[str] = Field(None, description="profiling rows; null = sample the surrogate")
    power_file: Optional[str] = None
    noise: float = Field(0.02, ge=0, description="multiplicative noise when sampling the surrogate")
    tps: List[int] = Field(default_factory=lambda: [1, 2, 4])
    batches: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16, 24, 32, 48, 64])
    kvs: List[int] = Field(default_factory=lambda: [0, 64, 128, 256, 512, 768, 1024])
    freq_step: int = Field(60, gt=0, description="MHz spacing of sampled frequencies")
    split: float = Field(0.9, gt=0, lt=1, description="train fraction")


class RunSpec(_Strict):
    seed: int = 0
    out: str = "results"
    trace: TraceSection = TraceSection()
    predictor: PredictorSection = PredictorSection()
    model: ModelSection = ModelSection()
    profiles: Optional[List[ProfileSpec]] = Field(None, description="engine profiles; null = defaults")
    slo: SloSection = SloSection()
    sim: SimSection = SimSection()
    sweep: SweepSection = SweepSection()
    dataset: DatasetSection = DatasetSection()


def load_spec(path=None, overrides: Optional[dict] = None) -> RunSpec:
    data = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"{p}: {exc.strerror or exc}") from None
        try:
            data = (json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)) or {}
        except (yaml.YAMLError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{p}: cannot parse: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for k in parents:
            node = node.setdefault(k, {})
        node[leaf] = value
    try:
        return RunSpec.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def dump_spec(spec: RunSpec) -> str:
    return yaml.safe_dump(spec.model_dump(mode="json"), sort_keys=True)


# ---------------------------------------------------------------- builders

def build_profiles(spec: RunSpec) -> List[EngineProfile]:
    raw = spec.profiles if spec.profiles is not None else [ProfileSpec(**p) for p in _D["profiles"]]
    try:
        return check_profiles([EngineProfile(**p.model_dump()) for p in raw])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_domain() -> FrequencyDomain:
    return FrequencyDomain(**_D["domain"])


def build_models(spec: RunSpec):
    m = spec.model
    f_max = float(build_domain().max_mhz)
    power = ReferencePowerModel(PowerParams(m.power.idle, m.power.c1, m.power.c2, f_max))
    if m.kind == "grid":
        try:
            return GridPerfModel.load(m.grid_file), power
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load model: {exc}") from None
    s = m.surrogate
    try:
        params = SurrogateParams({int(k): float(v) for k, v in s.amplitude.items()}, s.alpha, s.gamma, s.kappa, f_max)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return SurrogatePerfModel(params), power


def build_trace(spec: RunSpec, predictions: bool = True) -> List[Query]:
    t = spec.trace
    if t.file:
        try:
            queries = load_trace(t.file, t.max_tokens)
        except OSError as exc:
            raise ConfigError(f"{t.file}: {exc.strerror or exc}") from None
    else:
        syn = t.synthetic
        if syn.profile:
            prof = RpsProfile(tuple((float(a), float(b)) for a, b in syn.profile), syn.kind)
        else:
            prof = RpsProfile.constant(syn.rps)
        queries = synthesize_trace(TraceSpec(syn.duration, prof, LengthDist(syn.prompt.median, syn.prompt.sigma),
                                             LengthDist(syn.gen.median, syn.gen.sigma), spec.seed, t.max_tokens))
    if t.shape is not None:
        queries = shape_trace(queries, t.shape[0], t.shape[1], t.bin_seconds)
    if t.scale_peak is not None:
        queries = scale_trace(queries, t.scale_peak, t.bin_seconds)
    if predictions:
        p = spec.predictor
        cfg = PredictorConfig(p.mode, p.p95_error, p.conservative_factor, t.max_tokens)
        queries = assign_predictions(queries, cfg, spec.seed)
    return queries


def build_sim_config(spec: RunSpec) -> SimConfig:
    s = spec.sim
    slo = SloConfig(tbt_slo=spec.slo.tbt, e2e_slo=spec.slo.e2e) if spec.slo.e2e else None
    domain = build_domain()
    return SimConfig(
        slo=slo,
        tbt_slo=spec.slo.tbt,
        domain=domain,
        tokens_per_block=s.tokens_per_block,
        prefill=PrefillModel(s.prefill.enabled, s.prefill.base_latency, s.prefill.reference_prompt,
                             float(domain.max_mhz)),
        switch_latency=s.switch_latency,
        autoscale=s.autoscale,
        baseline=s.baseline,
        throttle=s.throttle,
        throttle_on_admission_only=s.throttle_on_admission_only,
        queue_bypass=s.queue_bypass,
        monitor_window=s.monitor_window,
        engine_tp=s.engine_tp,
        max_tokens=spec.trace.max_tokens,
        seed=spec.seed,
    )
