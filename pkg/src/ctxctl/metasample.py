"""Meta-dataset sampling: random systems, references and initial conditions."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .plant import PARAM_KEYS, EvaporatorParams, PlantDomainError, PlantInput, PlantState, \
    STEADY_INPUT, STEADY_STATE
from .refmodel import ReferenceSignal, sample_reference
from .streams import stream

FORMAT_VERSION = 1


@dataclass
class DistributionConfig:
    perturbation: float = 0.05
    amplitude_range: tuple = (20.0, 25.0)
    duration_range: tuple = (20, 50)
    horizon: int = 100
    initial_mode: str = "fixed"
    initial_state_low: tuple = (20.0, 45.0)
    initial_state_high: tuple = (30.0, 55.0)
    initial_input_low: tuple = (180.0, 200.0)
    initial_input_high: tuple = (200.0, 230.0)
    base_preset: str = "consistent"
    max_retries: int = 100

    def __post_init__(self):
        if not 0 <= self.perturbation < 1:
            raise ValueError("perturbation fraction must lie in [0, 1)")
        if self.initial_mode not in ("fixed", "sampled"):
            raise ValueError(f"unknown initial-condition mode {self.initial_mode!r}")

    @property
    def base(self) -> EvaporatorParams:
        return EvaporatorParams.preset(self.base_preset)


@dataclass
class MetaDraw:
    system: EvaporatorParams
    reference: ReferenceSignal
    x0: PlantState
    u_init: PlantInput
    ids: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "version": FORMAT_VERSION,
            "ids": self.ids,
            "system": self.system.to_dict(),
            "reference": self.reference.to_dict(),
            "x0": [float(self.x0.X2), float(self.x0.P2)],
            "u_init": [float(self.u_init.P100), float(self.u_init.F200)],
        })

    @classmethod
    def from_json(cls, line: str) -> "MetaDraw":
        d = json.loads(line)
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported meta-draw version {d.get('version')!r}")
        return cls(EvaporatorParams.from_dict(d["system"]), ReferenceSignal.from_dict(d["reference"]),
                   PlantState(*d["x0"]), PlantInput(*d["u_init"]), d.get("ids", {}))


def sample_system(rng: np.random.Generator, config: DistributionConfig,
                  base: EvaporatorParams | None = None) -> EvaporatorParams:
    """Every constant scaled by an independent factor in [1 - delta, 1 + delta]."""
    base = config.base if base is None else base
    nominal = base.as_array()
    delta = config.perturbation
    for _ in range(config.max_retries):
        factors = rng.uniform(1.0 - delta, 1.0 + delta, size=nominal.shape) if delta > 0 else 1.0
        params = EvaporatorParams.from_array((nominal * factors).tolist())
        try:
            return params.validate()
        except PlantDomainError:
            continue
    raise RuntimeError("could not sample a valid system within the retry budget")


def sample_initial(rng: np.random.Generator, config: DistributionConfig):
    if config.initial_mode == "fixed":
        return PlantState(*STEADY_STATE), PlantInput(*STEADY_INPUT)
    x = rng.uniform(config.initial_state_low, config.initial_state_high)
    u = rng.uniform(config.initial_input_low, config.initial_input_high)
    return PlantState(float(x[0]), float(x[1])), PlantInput(float(u[0]), float(u[1]))


def sample_draw(seed: int, index: int, config: DistributionConfig, scope: str = "train",
                sample_system_axis: bool = True, sample_reference_axis: bool = True,
                sample_initial_axis: bool = True, fixed: "MetaDraw | None" = None) -> MetaDraw:
    """One (system, reference, initial condition) triple.

    Each axis draws from its own substream ``(seed, scope, axis, index)``;
    disabled axes are copied from ``fixed``.
    """
    if fixed is None and not (sample_system_axis and sample_reference_axis and sample_initial_axis):
        raise ValueError("a fixed draw is required when an axis is frozen")
    ids = {"seed": int(seed), "scope": scope, "index": int(index)}
    if sample_system_axis:
        system = sample_system(stream(seed, scope, "system", index), config)
    else:
        system = fixed.system
    if sample_reference_axis:
        reference = sample_reference(stream(seed, scope, "reference", index), config.horizon,
                                     config.amplitude_range, config.duration_range)
    else:
        reference = fixed.reference
    if sample_initial_axis:
        x0, u0 = sample_initial(stream(seed, scope, "initial", index), config)
    else:
        x0, u0 = fixed.x0, fixed.u_init
    ids["sampled"] = [a for a, on in (("system", sample_system_axis), ("reference", sample_reference_axis),
                                       ("initial", sample_initial_axis)) if on]
    return MetaDraw(system, reference, x0, u0, ids)


def nominal_draw(seed: int, config: DistributionConfig, scope: str = "fixed") -> MetaDraw:
    """Base system, a seeded reference and the fixed operating point."""
    reference = sample_reference(stream(seed, scope, "reference", 0), config.horizon,
                                 config.amplitude_range, config.duration_range)
    x0, u0 = PlantState(*STEADY_STATE), PlantInput(*STEADY_INPUT)
    return MetaDraw(config.base, reference, x0, u0, {"seed": int(seed), "scope": scope, "index": 0,
                                                      "sampled": ["reference"]})


def write_jsonl(path, draws):
    with open(path, "w") as fh:
        for d in draws:
            fh.write(d.to_json() + "\n")


def read_jsonl(path) -> list:
    with open(path) as fh:
        return [MetaDraw.from_json(line) for line in fh if line.strip()]


def config_dict(config: DistributionConfig) -> dict:
    return asdict(config)


__all__ = ["DistributionConfig", "MetaDraw", "sample_system", "sample_draw", "nominal_draw",
           "sample_initial", "write_jsonl", "read_jsonl", "PARAM_KEYS"]
