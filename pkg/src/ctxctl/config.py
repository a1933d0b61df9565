"""Structured run configuration loaded from YAML.

Every numeric default of the package is a named key here. A file only needs
to list the keys it changes; unknown keys are rejected so typos surface.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from . import ctxformer as cf
from .baselines import IdentConfig, OCConfig
from .cltrain import StageConfig, TrainConfig
from .evalharness import TestProtocol
from .metasample import DistributionConfig
from .plant import EvaporatorParams, NoiseSpec
from .refmodel import ReferenceModel

PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    pass


def _preset_train(preset: str) -> dict:
    if preset == "desk":
        # faster rate and short stages so the curriculum fits a laptop session
        return {"lr": 1e-3, "stages": [{"index": 1, "max_iters": 300}, {"index": 2, "max_iters": 600},
                                       {"index": 3, "max_iters": 600}]}
    return {"lr": 1e-4, "stages": [{"index": 1, "max_iters": 30000}, {"index": 2, "max_iters": 30000},
                                   {"index": 3, "max_iters": 30000}]}


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    variant: str = "consistent"
    substeps: int = 4
    plant: EvaporatorParams = field(default_factory=EvaporatorParams.consistent)
    noise: NoiseSpec = field(default_factory=NoiseSpec.test)
    refmodel: ReferenceModel = field(default_factory=ReferenceModel)
    distribution: DistributionConfig = field(default_factory=DistributionConfig)
    controller: cf.ControllerConfig = field(default_factory=lambda: cf.ControllerConfig.preset("desk"))
    train: TrainConfig = field(default_factory=TrainConfig)
    oc: OCConfig = field(default_factory=OCConfig)
    ident: IdentConfig = field(default_factory=IdentConfig)
    protocol: TestProtocol = field(default_factory=TestProtocol)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset, "seed": self.seed, "variant": self.variant, "substeps": self.substeps,
            "plant": self.plant.to_dict(),
            "noise": _plain(asdict(self.noise)),
            "refmodel": asdict(self.refmodel),
            "distribution": _plain(asdict(self.distribution)),
            "controller": self.controller.to_dict(),
            "train": _train_dict(self.train),
            "oc": _plain(asdict(self.oc)),
            "ident": _plain(asdict(self.ident)),
            "protocol": {"n_systems": self.protocol.n_systems, "seed": self.protocol.seed,
                         "horizon": self.protocol.horizon, "controllers": list(self.protocol.controllers)},
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_TRAIN_SCALARS = ("batch", "lr", "restart_period", "restart_mult", "clip_norm", "train_noise",
                  "checkpoint_every", "validation_draws")


def _train_dict(t: TrainConfig) -> dict:
    d = {k: getattr(t, k) for k in _TRAIN_SCALARS}
    d["stages"] = [_plain(asdict(s)) for s in t.stages]
    return d


def _check_keys(section: str, given: dict, allowed):
    unknown = set(given) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def _build(cls, section: str, given: dict, base=None):
    names = [f.name for f in fields(cls)]
    _check_keys(section, given, names)
    kw = dict(asdict(base)) if base is not None else {}
    for k, v in given.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


SECTIONS = ("preset", "seed", "variant", "substeps", "plant", "noise", "refmodel", "distribution",
            "controller", "train", "oc", "ident", "protocol")


def build_config(doc: dict | None = None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    """Resolve a (possibly partial) config document on top of a preset."""
    doc = dict(doc or {})
    _check_keys("config", doc, SECTIONS)
    preset = preset or doc.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    seed = int(doc.get("seed", 0) if seed is None else seed)
    variant = doc.get("variant", "consistent")
    substeps = int(doc.get("substeps", 4))

    plant_doc = doc.get("plant", {})
    if isinstance(plant_doc, str):
        plant = EvaporatorParams.preset(plant_doc)
    else:
        try:
            plant = EvaporatorParams.from_dict({**EvaporatorParams.consistent().to_dict(), **plant_doc})
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    noise = _build(NoiseSpec, "noise", doc.get("noise", {}), NoiseSpec.test())
    refmodel = _build(ReferenceModel, "refmodel", doc.get("refmodel", {}))
    distribution = _build(DistributionConfig, "distribution", doc.get("distribution", {}))

    ctrl_doc = dict(doc.get("controller", {}))
    _check_keys("controller", ctrl_doc, [f.name for f in fields(cf.ControllerConfig)])
    try:
        controller = cf.ControllerConfig.preset(preset, **ctrl_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid controller: {exc}") from exc

    train_doc = _merge(_preset_train(preset), doc.get("train", {}))
    _check_keys("train", train_doc, _TRAIN_SCALARS + ("stages",))
    stages = []
    for s in train_doc.pop("stages"):
        s = dict(s)
        _check_keys("train.stages", s, [f.name for f in fields(StageConfig)])
        if "index" not in s:
            raise ConfigError("each training stage needs an index")
        j = int(s.pop("index"))
        if "loss_min" in s:
            s["loss_min"] = float(s["loss_min"])
        try:
            stages.append(StageConfig.default(j, **s))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if not stages or [s.index for s in stages] != sorted(s.index for s in stages):
        raise ConfigError("training stages must be non-empty and ordered")
    train = TrainConfig(preset=preset, seed=seed, variant=variant, substeps=substeps, stages=stages,
                        distribution=distribution, controller=controller, refmodel=refmodel,
                        noise=NoiseSpec(noise.process_var, noise.measurement_var,
                                        bool(train_doc.get("train_noise", False))),
                        **train_doc)

    oc = _build(OCConfig, "oc", {"variant": variant, "substeps": substeps, **doc.get("oc", {})})
    ident = _build(IdentConfig, "ident", {"variant": variant, "substeps": substeps, **doc.get("ident", {})})

    proto_doc = dict(doc.get("protocol", {}))
    _check_keys("protocol", proto_doc, ("n_systems", "seed", "horizon", "controllers"))
    if "controllers" in proto_doc:
        proto_doc["controllers"] = tuple(proto_doc["controllers"])
    try:
        protocol = TestProtocol(noise=noise, distribution=distribution, refmodel=refmodel, **proto_doc)
    except ValueError as exc:
        raise ConfigError(f"invalid protocol: {exc}") from exc

    return RunConfig(preset, seed, variant, substeps, plant, noise, refmodel, distribution, controller,
                     train, oc, ident, protocol)


def load_config(path: str | None = None, preset: str | None = None, seed: int | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
    return build_config(doc, preset, seed)
