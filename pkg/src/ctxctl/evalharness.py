"""Metrics, the fresh-system test protocol and result files.

Every controller on a draw sees the same system, reference, initial state and
noise realisation; the noise streams are keyed by (seed, "test", draw) and a
digest of the samples actually used is stored with each record so the
common-random-numbers discipline can be audited afterwards.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ctxformer as cf
from .baselines import IdentConfig, OCConfig, generate_ident_data, identify_greybox, run_receding_horizon_batch
from .cltrain import ConstantPolicy, TracePolicy, TransformerPolicy, rollout_closed_loop
from .metasample import DistributionConfig, sample_draw
from .plant import NoiseSpec, NoiseStream, PlantDivergence
from .refmodel import ReferenceModel
from .streams import stream

# full-scale figures kept for comparison only; none is reproduced at desk scale
REFERENCE_METADATA = {
    "mrmse_ctx": 7e-4,
    "mrmse_oracle": 1e-2,
    "mrmse_id": 2e-2,
    "ident_validation_rmse": 0.7479,
    "ctx_inference_ms": 2.8,
    "training_days": 6,
}


def _pair(y_d, y_cl):
    a = np.asarray(y_d, dtype=float)
    b = np.asarray(y_cl, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty sequences")
    return a, b


def m_rmse(y_d, y_cl) -> float:
    """Root mean square of the desired-vs-closed-loop output difference."""
    a, b = _pair(y_d, y_cl)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def matching_error(y_d, y_cl) -> float:
    """Euclidean norm of the output difference (= sqrt(N) * M-RMSE)."""
    a, b = _pair(y_d, y_cl)
    return float(np.sqrt(np.sum((a - b) ** 2)))


def boxplot_stats(values) -> dict:
    """Quartiles (linear interpolation) with Tukey 1.5 IQR whiskers."""
    x = np.sort(np.asarray([v for v in values if np.isfinite(v)], dtype=float))
    if x.size == 0:
        return {"n": 0}
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    return {
        "n": int(x.size), "q1": float(q1), "median": float(med), "q3": float(q3),
        # whiskers never retract inside the box (interpolated quartiles can lie beyond the data)
        "whisker_lo": float(min(inside.min(), q1)), "whisker_hi": float(max(inside.max(), q3)),
        "outliers": [float(v) for v in x[(x < lo_fence) | (x > hi_fence)]],
        "mean": float(x.mean()),
    }


@dataclass
class TestProtocol:
    __test__ = False  # keep pytest from collecting it

    n_systems: int = 20
    seed: int = 20240917
    horizon: int = 100
    noise: NoiseSpec = field(default_factory=NoiseSpec.test)
    controllers: tuple = ("ctx", "oracle-5", "id-5")
    scope: str = "test"
    distribution: DistributionConfig = field(default_factory=DistributionConfig)
    refmodel: ReferenceModel = field(default_factory=ReferenceModel)

    def __post_init__(self):
        if self.n_systems < 1:
            raise ValueError("need at least one test system")
        for c in self.controllers:
            parse_controller(c)

    def draws(self) -> list:
        dist = self.distribution
        if dist.horizon != self.horizon:
            dist = DistributionConfig(**{**asdict(dist), "horizon": self.horizon})
        return [sample_draw(self.seed, i, dist, scope=self.scope) for i in range(self.n_systems)]

    def noise_stream(self, i: int) -> NoiseStream:
        return NoiseStream(self.noise, self.seed, self.scope, i)


def parse_controller(name: str):
    """'ctx', 'constant', 'oracle-<N_H>' or 'id-<N_H>' -> (kind, horizon)."""
    if name in ("ctx", "constant"):
        return name, None
    kind, _, h = name.partition("-")
    if kind in ("oracle", "id") and h.isdigit() and int(h) >= 1:
        return kind, int(h)
    raise ValueError(f"unknown controller {name!r}")


@dataclass
class DrawRecord:
    controller: str
    draw: int
    epsilon: float
    mrmse: float
    time_ms: float
    infeasible: int
    noise_digest: str
    status: str = "ok"
    trajectory: dict | None = None
    extra: dict = field(default_factory=dict)

    def summary_row(self) -> list:
        return [self.controller, self.draw, repr(self.epsilon), repr(self.time_ms), self.infeasible]


@dataclass
class SummaryStats:
    epsilon: dict
    box: dict
    mean_trajectory: dict
    std_trajectory: dict
    timing: dict
    infeasible: dict

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon, "box": self.box,
            "mean_trajectory": {k: v.tolist() for k, v in self.mean_trajectory.items()},
            "std_trajectory": {k: v.tolist() for k, v in self.std_trajectory.items()},
            "timing": self.timing, "infeasible": self.infeasible,
        }


def _trajectory(reference, y_d, y_cl, inputs) -> dict:
    return {"r": np.asarray(reference, dtype=float), "y_d": np.asarray(y_d, dtype=float),
            "y_cl": np.asarray(y_cl, dtype=float), "u": np.asarray(inputs, dtype=float).reshape(-1, 2)}


def _failed(name, i, digest, exc) -> DrawRecord:
    return DrawRecord(name, i, float("nan"), float("nan"), float("nan"), 0, digest,
                      status=f"failed: {type(exc).__name__}: {exc}")


def run_policy(name: str, policy, draws, protocol: TestProtocol) -> list:
    """Closed-loop runs of a per-step policy (contextual, constant, trace)."""
    records = []
    for i, d in enumerate(draws):
        noise = protocol.noise_stream(i)
        digest = noise.digest(protocol.horizon)
        pol = policy(i, d) if callable(policy) and not hasattr(policy, "reset") else policy
        timed = _Timed(pol)
        try:
            rec = rollout_closed_loop(d.system, d.reference, d.x0, d.u_init, timed, noise, protocol.refmodel)
        except (PlantDivergence, ValueError, FloatingPointError) as exc:
            records.append(_failed(name, i, digest, exc))
            continue
        records.append(DrawRecord(
            name, i, matching_error(rec.y_desired, rec.y_closed), m_rmse(rec.y_desired, rec.y_closed),
            1e3 * timed.mean(), 0, digest,
            trajectory=_trajectory(rec.reference, rec.y_desired, rec.y_closed, rec.inputs)))
    return records


class _Timed:
    """Wraps a policy and accumulates wall time per call."""

    def __init__(self, policy):
        self.policy = policy
        self.total = 0.0
        self.calls = 0

    def reset(self, u_init):
        self.policy.reset(u_init)

    def __call__(self, k, e_k):
        t0 = time.perf_counter()
        u = self.policy(k, e_k)
        self.total += time.perf_counter() - t0
        self.calls += 1
        return u

    def mean(self) -> float:
        return self.total / max(self.calls, 1)


def run_oc(name: str, draws, models, protocol: TestProtocol, oc_cfg: OCConfig) -> list:
    """Receding-horizon OC for all draws in one batch."""
    noises = [protocol.noise_stream(i) for i in range(len(draws))]
    digests = [n.digest(protocol.horizon) for n in noises]
    ok = [i for i, m in enumerate(models) if m is not None]
    records = {}
    for i, m in enumerate(models):
        if m is None:
            records[i] = _failed(name, i, digests[i], RuntimeError("no model"))
    if ok:
        res = run_receding_horizon_batch([draws[i].system for i in ok], [models[i] for i in ok],
                                         [draws[i].reference for i in ok], oc_cfg,
                                         [draws[i].x0 for i in ok], [draws[i].u_init for i in ok],
                                         [noises[i] for i in ok], protocol.refmodel)
        step_ms = 1e3 * float(np.mean(res.step_times))
        for j, i in enumerate(ok):
            if res.failed_at[j] >= 0:
                records[i] = _failed(name, i, digests[i],
                                     PlantDivergence(f"plant diverged at step {res.failed_at[j]}"))
                continue
            records[i] = DrawRecord(
                name, i, float(res.epsilon[j]), m_rmse(res.y_desired[j], res.y_closed[j]), step_ms,
                int(res.infeasible_count[j]), digests[i],
                trajectory=_trajectory(res.reference[j], res.y_desired[j], res.y_closed[j], res.inputs[j]))
    return [records[i] for i in range(len(draws))]


def identify_models(draws, protocol: TestProtocol, ident_cfg: IdentConfig) -> tuple:
    """Grey-box estimates for every draw, from the nominal parameters."""
    data, val, idx, reports = [], [], [], [None] * len(draws)
    for i, d in enumerate(draws):
        try:
            data.append(generate_ident_data(d.system, ident_cfg, stream(protocol.seed, "ident", i),
                                            NoiseStream(protocol.noise, protocol.seed, "ident", i)))
            val.append(generate_ident_data(d.system, ident_cfg, stream(protocol.seed, "ident-val", i),
                                           NoiseStream(protocol.noise, protocol.seed, "ident-val", i)))
            idx.append(i)
        except (PlantDivergence, ValueError):
            continue
    models = [None] * len(draws)
    if idx:
        for i, rep in zip(idx, identify_greybox(data, ident_cfg, protocol.distribution.base, val)):
            models[i] = rep.params
            reports[i] = rep
    return models, reports


def run_test_suite(protocol: TestProtocol, checkpoint=None, oc_config: OCConfig | None = None,
                   ident_config: IdentConfig | None = None, out_dir=None, policy=None, log=None):
    """Evaluate every requested controller on the same fresh draws.

    ``checkpoint`` is a path or a (weights, ControllerConfig) pair and is
    needed only for the contextual controller; ``policy`` overrides it (any
    object with ``reset`` and ``__call__(k, e_k)``, or a factory
    ``(draw_index, draw) -> policy``).
    """
    oc_config = oc_config or OCConfig()
    ident_config = ident_config or IdentConfig()
    draws = protocol.draws()
    records = []
    ident_reports = None
    models_id = None
    for name in protocol.controllers:
        kind, horizon = parse_controller(name)
        t0 = time.perf_counter()
        if kind == "ctx":
            pol = policy if policy is not None else _load_policy(checkpoint)
            recs = run_policy(name, pol, draws, protocol)
        elif kind == "constant":
            recs = run_policy(name, lambda i, d: ConstantPolicy(d.u_init), draws, protocol)
        else:
            cfg = OCConfig(**{**asdict(oc_config), "horizon": horizon})
            if kind == "oracle":
                models = [d.system for d in draws]
            else:
                if models_id is None:
                    models_id, ident_reports = identify_models(draws, protocol, ident_config)
                models = models_id
            recs = run_oc(name, draws, models, protocol, cfg)
        if log:
            log(f"{name}: {time.perf_counter() - t0:.1f}s")
        records.extend(recs)
    stats = summarize(records, protocol.controllers)
    if out_dir is not None:
        write_results(out_dir, protocol, records, stats, ident_reports)
    return stats, records


def _load_policy(checkpoint):
    if checkpoint is None:
        raise FileNotFoundError("the contextual controller needs a checkpoint")
    if isinstance(checkpoint, (str, os.PathLike)):
        if not os.path.exists(checkpoint):
            raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
        weights, cfg, _, _ = cf.load_checkpoint(checkpoint)
    else:
        weights, cfg = checkpoint
    return TransformerPolicy(weights, cfg)


def trace_policy_factory(records) -> callable:
    """Policies replaying the input traces of earlier records, by draw."""
    by_draw = {r.draw: r.trajectory["u"] for r in records if r.trajectory is not None}
    return lambda i, d: TracePolicy(by_draw[i])


def summarize(records, controllers) -> SummaryStats:
    eps, box, mean_t, std_t, timing, infeasible = {}, {}, {}, {}, {}, {}
    for name in controllers:
        recs = [r for r in records if r.controller == name]
        e = [r.epsilon for r in recs]
        eps[name] = e
        box[name] = boxplot_stats(e)
        ys = [r.trajectory["y_cl"] for r in recs if r.trajectory is not None and r.status == "ok"]
        if ys:
            Y = np.stack(ys)
            mean_t[name], std_t[name] = Y.mean(axis=0), Y.std(axis=0)
        t = np.array([r.time_ms for r in recs if np.isfinite(r.time_ms)])
        timing[name] = ({"mean_ms": float(t.mean()), "p50_ms": float(np.percentile(t, 50)),
                         "p95_ms": float(np.percentile(t, 95))} if t.size else {})
        infeasible[name] = int(sum(r.infeasible for r in recs))
    return SummaryStats(eps, box, mean_t, std_t, timing, infeasible)


SUMMARY_HEADER = ["controller", "draw", "epsilon", "time_ms", "infeasible"]
TRAJECTORY_HEADER = ["k", "r", "y_d", "y_cl", "u1", "u2"]


def write_trajectory_csv(path, traj: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for k in range(len(traj["r"])):
            w.writerow([k, repr(float(traj["r"][k])), repr(float(traj["y_d"][k])), repr(float(traj["y_cl"][k])),
                        repr(float(traj["u"][k, 0])), repr(float(traj["u"][k, 1]))])


def write_results(out_dir, protocol: TestProtocol, records, stats: SummaryStats, ident_reports=None):
    """summary.csv, results.jsonl, summary.json and one trajectory CSV per run."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for r in records:
            w.writerow(r.summary_row())
    with open(os.path.join(out_dir, "results.jsonl"), "w") as fh:
        for r in records:
            fh.write(json.dumps({"draw": r.draw, "controller": r.controller, "epsilon": _num(r.epsilon),
                                 "mrmse": _num(r.mrmse), "infeasible": r.infeasible, "time_ms": _num(r.time_ms),
                                 "noise_digest": r.noise_digest, "status": r.status}) + "\n")
    tdir = os.path.join(out_dir, "trajectories")
    os.makedirs(tdir, exist_ok=True)
    for r in records:
        if r.trajectory is not None:
            write_trajectory_csv(os.path.join(tdir, f"{r.controller}_draw{r.draw:03d}.csv"), r.trajectory)
    doc = {
        "protocol": {"n_systems": protocol.n_systems, "seed": protocol.seed, "horizon": protocol.horizon,
                     "noise": asdict(protocol.noise), "controllers": list(protocol.controllers)},
        "stats": _clean(stats.to_dict()),
        "reference_metadata": REFERENCE_METADATA,
    }
    if ident_reports is not None:
        doc["identification"] = [None if rep is None else {
            "initial_objective": rep.initial_objective, "final_objective": rep.final_objective,
            "steps": rep.steps, "stop_reason": rep.stop_reason, "train_rmse": _num(rep.train_rmse),
            "validation_rmse": _num(rep.validation_rmse)} for rep in ident_reports]
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _num(x):
    return None if x is None or not math.isfinite(x) else x


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        return _num(obj)
    return obj
