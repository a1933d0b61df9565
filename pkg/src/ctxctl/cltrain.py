"""Closed-loop rollouts and curriculum training of the contextual controller."""
from __future__ import annotations

import csv
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import ctxformer as cf
from . import diffcore as dc
from .metasample import DistributionConfig, MetaDraw, nominal_draw, sample_draw
from .optim import Adam, WarmRestartSchedule
from .plant import Evaporator, NoiseSpec, NoiseStream, PlantDivergence, PlantInput, PlantState, check_finite
from .refmodel import ReferenceModel, desired_output
from .streams import stream

log = logging.getLogger(__name__)

# desk thresholds: N * (M-RMSE target)^2 with the per-stage validation M-RMSE
# targets 7e-4, 1e-2, 2e-2 and N = 100
DEFAULT_LOSS_MIN = (4.9e-5, 1e-2, 4e-2, 4e-2)


@dataclass
class RolloutRecord:
    reference: np.ndarray
    y_desired: np.ndarray
    y_closed: np.ndarray
    inputs: np.ndarray
    errors: np.ndarray
    rss: object  # DTensor when recorded on a tape, float otherwise

    @property
    def rss_value(self) -> float:
        return float(dc.value_of(self.rss))

    @property
    def N(self) -> int:
        return len(self.reference)


class TransformerPolicy:
    def __init__(self, weights: dict, cfg: cf.ControllerConfig):
        self.weights = weights
        self.cfg = cfg
        self.buffer = None

    def reset(self, u_init):
        self.buffer = cf.ContextBuffer(self.cfg, u_init)

    def __call__(self, k, e_k):
        self.buffer.push(e_k)
        return self.buffer.output(self.weights, e_k)


class ConstantPolicy:
    def __init__(self, u):
        self.u = u.values() if isinstance(u, PlantInput) else np.asarray(u, dtype=float)

    def reset(self, u_init):
        pass

    def __call__(self, k, e_k):
        return self.u


class TracePolicy:
    """Replays a recorded input sequence."""

    def __init__(self, inputs):
        self.inputs = np.asarray(inputs, dtype=float)

    def reset(self, u_init):
        pass

    def __call__(self, k, e_k):
        return self.inputs[k]


def rollout_closed_loop(system, reference, x0: PlantState, u_init, policy, noise: NoiseStream | None = None,
                        refmodel: ReferenceModel = ReferenceModel(), variant: str = "consistent",
                        substeps: int = 4, plant=None) -> RolloutRecord:
    """Simulate the loop for N = len(reference) steps and accumulate the RSS.

    ``policy`` is a :class:`TransformerPolicy` (weights may be tape leaves) or
    any object with ``reset(u_init)`` and ``__call__(k, e_k) -> u_k``.
    """
    r = np.asarray(getattr(reference, "samples", reference), dtype=float)
    N = len(r)
    if N < 1:
        raise ValueError("horizon must be >= 1")
    plant = Evaporator(system, variant, substeps) if plant is None else plant
    y0 = float(dc.value_of(x0.X2))
    yd = desired_output(refmodel, r, refmodel.initial_state(y0, r[0]))
    use_noise = noise is not None and noise.spec.enabled
    policy.reset(u_init)
    state = x0
    rss = 0.0
    ys, us, es = [], [], []
    for k in range(N):
        y = state.X2 + noise.measurement(k) if use_noise else state.X2
        e = r[k] - y
        u = policy(k, e)
        diff = yd[k] - y
        rss = dc.add(rss, dc.square(diff))
        ys.append(float(dc.value_of(y)))
        es.append(float(dc.value_of(e)))
        uv = np.asarray(dc.value_of(u), dtype=float)
        us.append(uv)
        if isinstance(u, dc.DTensor):
            uin = PlantInput(u[0], u[1])
        else:
            uin = PlantInput(uv[0], uv[1])
        try:
            state = plant.step(state, uin, noise.process(k) if use_noise else None)
            check_finite(state, k)
        except (PlantDivergence, ValueError) as exc:
            partial = RolloutRecord(r[:k + 1], yd[:k + 1], np.array(ys), np.array(us), np.array(es), rss)
            raise PlantDivergence(f"closed loop diverged at step {k}: {exc}", step=k, partial=partial) from exc
    return RolloutRecord(r, yd, np.array(ys), np.array(us), np.array(es), rss)


def rollout_draw(draw: MetaDraw, weights: dict, cfg: cf.ControllerConfig, noise=None, **kw) -> RolloutRecord:
    return rollout_closed_loop(draw.system, draw.reference, draw.x0, draw.u_init,
                               TransformerPolicy(weights, cfg), noise, **kw)


def rss_and_grad(weights: dict, cfg: cf.ControllerConfig, draws, noises=None, **kw):
    """Mean RSS over ``draws`` and its gradient w.r.t. every weight."""
    tape = dc.Tape()
    leaves = cf.bind(weights, tape)
    total = 0.0
    recs = []
    for i, draw in enumerate(draws):
        noise = noises[i] if noises is not None else None
        rec = rollout_draw(draw, leaves, cfg, noise, **kw)
        recs.append(rec)
        total = dc.add(total, rec.rss)
    loss = dc.mul(total, 1.0 / len(draws))
    gs = tape.backward(loss)
    grads = {k: gs[v] for k, v in leaves.items()}
    tape.release()
    return float(dc.value_of(loss)), grads, recs


@dataclass
class StageConfig:
    index: int
    sample_system: bool
    sample_reference: bool
    sample_initial: bool
    loss_min: float
    max_iters: int = 5000
    window: int = 50

    @classmethod
    def default(cls, j: int, **kw) -> "StageConfig":
        if j not in (1, 2, 3, 4):
            raise ValueError("curriculum stages are numbered 1..4")
        flags = dict(sample_system=j >= 2, sample_reference=j >= 3, sample_initial=j >= 4)
        return cls(index=j, **{"loss_min": DEFAULT_LOSS_MIN[j - 1], **flags, **kw})


@dataclass
class TrainConfig:
    preset: str = "desk"
    seed: int = 0
    batch: int = 1
    lr: float = 1e-4
    restart_period: int = 1000
    restart_mult: int = 2
    clip_norm: float = 1.0
    train_noise: bool = False
    variant: str = "consistent"
    substeps: int = 4
    checkpoint_every: int = 500
    validation_draws: int = 5
    stages: list = field(default_factory=lambda: [StageConfig.default(j) for j in (1, 2, 3)])
    distribution: DistributionConfig = field(default_factory=DistributionConfig)
    controller: cf.ControllerConfig = field(default_factory=lambda: cf.ControllerConfig.preset("desk"))
    refmodel: ReferenceModel = field(default_factory=ReferenceModel)
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(enabled=True))

    def make_optimizer(self) -> Adam:
        return Adam(WarmRestartSchedule(self.lr, self.restart_period, self.restart_mult),
                    clip_norm=self.clip_norm)


@dataclass
class StageResult:
    stage: int
    weights: dict
    losses: list
    iterations: int
    converged: bool
    validation_mrmse: float = float("nan")


class TrainingAborted(RuntimeError):
    def __init__(self, message, checkpoint=None, weights=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.weights = weights


def stage_draws(cfg: TrainConfig, stage: StageConfig, iteration: int, fixed: MetaDraw) -> list:
    b = cfg.batch
    return [sample_draw(cfg.seed, iteration * b + i, cfg.distribution, scope=f"train-stage{stage.index}",
                        sample_system_axis=stage.sample_system, sample_reference_axis=stage.sample_reference,
                        sample_initial_axis=stage.sample_initial, fixed=fixed)
            if (stage.sample_system or stage.sample_reference or stage.sample_initial) else fixed
            for i in range(b)]


def _noises(cfg: TrainConfig, stage: StageConfig, iteration: int):
    if not cfg.train_noise:
        return None
    return [NoiseStream(cfg.noise, cfg.seed, "train", stage.index, iteration, i) for i in range(cfg.batch)]


def train_stage(stage: StageConfig, weights: dict, optimizer: Adam, cfg: TrainConfig, fixed: MetaDraw,
                start_iter: int = 0, callback=None, checkpoint_dir=None) -> StageResult:
    """Gradient steps on the mean closed-loop RSS until the gate loss drops
    below ``stage.loss_min`` or ``stage.max_iters`` is reached.

    The gate loss starts at +inf and is the moving average of the last
    ``stage.window`` losses (``window=1`` gives the raw per-iteration loss).
    Every evaluated loss is followed by one optimizer step.
    """
    kw = dict(refmodel=cfg.refmodel, variant=cfg.variant, substeps=cfg.substeps)
    recent = deque(maxlen=max(1, stage.window))
    gate = math.inf
    losses = []
    it = start_iter
    last_good = dict(weights)
    while gate >= stage.loss_min and it < stage.max_iters:
        draws = stage_draws(cfg, stage, it, fixed)
        lr = optimizer.lr
        try:
            loss, grads, _ = rss_and_grad(weights, cfg.controller, draws, _noises(cfg, stage, it), **kw)
        except (PlantDivergence, cf.NonFiniteActivation) as exc:
            loss, grads = math.nan, None
            log.warning("stage %d iteration %d: %s", stage.index, it, exc)
        if not math.isfinite(loss) or any(not np.all(np.isfinite(g)) for g in (grads or {}).values()):
            path = None
            if checkpoint_dir is not None:
                path = os.path.join(checkpoint_dir, f"stage{stage.index}_lastgood.npz")
                save_training_checkpoint(path, last_good, optimizer, cfg, stage.index, it, losses)
            raise TrainingAborted(f"non-finite loss at stage {stage.index}, iteration {it}", path, last_good)
        losses.append((it, loss, lr))
        recent.append(loss)
        gate = sum(recent) / len(recent)
        last_good = weights
        weights, _ = optimizer.step(weights, grads)
        it += 1
        if callback is not None:
            callback(stage.index, it, loss, lr)
        if checkpoint_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_training_checkpoint(os.path.join(checkpoint_dir, f"stage{stage.index}_it{it}.npz"),
                                     weights, optimizer, cfg, stage.index, it, losses)
    return StageResult(stage.index, weights, losses, it, gate < stage.loss_min)


def validation_mrmse(weights: dict, cfg: TrainConfig, n: int | None = None) -> float:
    """Mean matching RMSE over fresh noiseless systems and references."""
    n = cfg.validation_draws if n is None else n
    vals = []
    for i in range(n):
        draw = sample_draw(cfg.seed, i, cfg.distribution, scope="validation")
        rec = rollout_draw(draw, weights, cfg.controller, None, refmodel=cfg.refmodel,
                           variant=cfg.variant, substeps=cfg.substeps)
        vals.append(math.sqrt(np.mean((rec.y_desired - rec.y_closed) ** 2)))
    return float(np.mean(vals))


def run_curriculum(cfg: TrainConfig, weights: dict | None = None, out_dir=None, callback=None):
    """Train through ``cfg.stages`` in order, warm-starting each stage."""
    if not cfg.stages:
        raise ValueError("curriculum needs at least one stage")
    if [s.index for s in cfg.stages] != sorted(s.index for s in cfg.stages):
        raise ValueError("curriculum stages must be ordered")
    if weights is None:
        weights = cf.init_weights(cfg.controller, stream(cfg.seed, "init"))
    fixed = nominal_draw(cfg.seed, cfg.distribution)
    results = []
    trace = []
    for stage in cfg.stages:
        optimizer = cfg.make_optimizer()
        res = train_stage(stage, weights, optimizer, cfg, fixed, callback=callback, checkpoint_dir=out_dir)
        res.validation_mrmse = validation_mrmse(res.weights, cfg) if cfg.validation_draws else float("nan")
        weights = res.weights
        results.append(res)
        trace.extend((it, stage.index, loss, lr) for it, loss, lr in res.losses)
        if out_dir is not None:
            save_training_checkpoint(os.path.join(out_dir, f"stage{stage.index}.npz"), weights, optimizer,
                                     cfg, stage.index, res.iterations, res.losses)
        log.info("stage %d: %d iterations, validation M-RMSE %.4g", stage.index, res.iterations,
                 res.validation_mrmse)
    if out_dir is not None:
        write_loss_csv(os.path.join(out_dir, "losses.csv"), trace)
        cf.save_checkpoint(os.path.join(out_dir, "controller.npz"), weights, cfg.controller, cfg.seed,
                           cfg.stages[-1].index)
    return weights, results


def save_training_checkpoint(path, weights, optimizer: Adam, cfg: TrainConfig, stage: int, iteration: int,
                             losses):
    cf.save_checkpoint(path, weights, cfg.controller, cfg.seed, stage,
                       extra_arrays={f"opt/{k}": v for k, v in optimizer.state_arrays().items()},
                       meta={"iteration": int(iteration), "n_losses": len(losses)})


def load_training_checkpoint(path, cfg: TrainConfig):
    weights, ccfg, record, extra = cf.load_checkpoint(path)
    optimizer = cfg.make_optimizer()
    optimizer.load_state_arrays({k[4:]: v for k, v in extra.items() if k.startswith("opt/")})
    return weights, optimizer, record


def write_loss_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "stage", "loss", "lr"])
        for it, stage, loss, lr in trace:
            w.writerow([it, stage, repr(float(loss)), repr(float(lr))])
