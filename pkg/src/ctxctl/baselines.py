"""Model-based competitors: receding-horizon optimal control and grey-box
identification of the evaporator parameters.

Both solvers run a batch of independent problems in lockstep: parameters,
states and inputs carry a leading batch axis and every primitive broadcasts,
so one tape serves all draws. Objectives are summed over the batch, which
leaves each problem's gradient untouched.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .optim import WarmRestartSchedule
from .plant import STEADY_INPUT, STEADY_STATE, Evaporator, EvaporatorParams, NoiseStream, PlantDivergence, \
    PlantInput, PlantState, simulate, stack_params
from .refmodel import ReferenceModel, desired_output

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class OCConfig:
    horizon: int = 5
    max_iters: int = 200
    lr: float = 2.0
    warm_start: bool = True
    lower: tuple = (0.0, 1.0)
    upper: tuple = (math.inf, math.inf)
    tol: float = 1e-10
    min_lr_ratio: float = 1e-6
    grow: float = 1.5
    variant: str = "consistent"
    substeps: int = 4

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("OC horizon must be >= 1")
        if self.max_iters < 0:
            raise ValueError("iteration budget must be non-negative")
        if not self.lower[1] > 0:
            raise ValueError("the F200 lower bound must be positive")


@dataclass
class IdentConfig:
    max_steps: int = 100
    threshold: float = 1e-4
    lr: float = 1e-3
    amplitude_range: tuple = (150.0, 250.0)
    step_length_range: tuple = (1, 10)
    length: int = 1000
    variant: str = "consistent"
    substeps: int = 4

    def __post_init__(self):
        if self.max_steps < 1 or self.length < 1 or self.threshold <= 0:
            raise ValueError("identification budgets must be positive")


# -- receding-horizon optimal control ---------------------------------------

def _broadcast_state(state: PlantState, B: int):
    return (np.broadcast_to(np.asarray(dc.value_of(state.X2), dtype=float), (B,)).copy(),
            np.broadcast_to(np.asarray(dc.value_of(state.P2), dtype=float), (B,)).copy())


def oc_objective(model: Evaporator, X2, P2, U, yd):
    """Per-problem mean squared tracking error of the predicted outputs
    y[1..W] under inputs ``U`` [B, W, 2]; differentiable in ``U``."""
    W = yd.shape[1]
    state = PlantState(X2, P2)
    acc = 0.0
    for j in range(W):
        state = model.step(state, PlantInput(U[:, j, 0], U[:, j, 1]))
        acc = dc.add(acc, dc.square(yd[:, j] - state.X2))
    return dc.mul(acc, 1.0 / W)


def _value_and_grad(model, X2, P2, U, yd):
    tape = dc.Tape()
    leaf = tape.leaf(U)
    with np.errstate(all="ignore"):
        try:
            J = oc_objective(model, X2, P2, leaf, yd)
        except ValueError:
            tape.release()
            return np.full(U.shape[0], np.inf), np.zeros_like(U)
        Jv = np.array(dc.value_of(J), dtype=float)
        finite = np.isfinite(Jv)
        if not finite.any():
            tape.release()
            return np.full(U.shape[0], np.inf), np.zeros_like(U)
        # rows are independent, so a 0/1 mask drops non-finite problems
        g = tape.backward(dc.sum_(dc.mul(J, finite.astype(float))))[leaf]
    tape.release()
    Jv = np.where(finite, Jv, np.inf)
    g = np.where(np.isfinite(g), g, 0.0)
    return Jv, g


@dataclass
class OCSolution:
    inputs: np.ndarray        # [B, W, 2]
    objective: np.ndarray     # [B]
    initial_objective: np.ndarray
    iterations: int
    infeasible: np.ndarray    # [B] bool
    history: list = field(default_factory=list)


def solve_oc_batch(model: Evaporator, X2, P2, yd, U0, cfg: OCConfig, record_history=False) -> OCSolution:
    """Single-shooting Adam with per-problem backtracking.

    A trial step is accepted only if it does not increase that problem's
    objective. On rejection the step size is halved and the moments are
    cleared; accepted steps let the step size regrow up to ``cfg.lr``.
    """
    U = np.array(U0, dtype=float)
    lo, hi = np.asarray(cfg.lower, dtype=float), np.asarray(cfg.upper, dtype=float)
    U = np.clip(U, lo, hi)
    J, G = _value_and_grad(model, X2, P2, U, yd)
    J0 = J.copy()
    B = U.shape[0]
    infeasible = ~np.isfinite(J)
    lr = np.full(B, cfg.lr)
    m = np.zeros_like(U)
    v = np.zeros_like(U)
    t = np.zeros(B)
    history = [J.copy()] if record_history else []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        active = np.isfinite(J) & (J > cfg.tol) & (lr > cfg.lr * cfg.min_lr_ratio)
        if not active.any():
            it -= 1
            break
        tn = t + 1
        mn = BETA1 * m + (1 - BETA1) * G
        vn = BETA2 * v + (1 - BETA2) * G * G
        c1 = (1 - BETA1 ** tn)[:, None, None]
        c2 = (1 - BETA2 ** tn)[:, None, None]
        step = lr[:, None, None] * (mn / c1) / (np.sqrt(vn / c2) + ADAM_EPS)
        trial = np.where(active[:, None, None], np.clip(U - step, lo, hi), U)
        Jt, Gt = _value_and_grad(model, X2, P2, trial, yd)
        acc = active & np.isfinite(Jt) & (Jt <= J)
        rej = active & ~acc
        a3 = acc[:, None, None]
        U = np.where(a3, trial, U)
        G = np.where(a3, Gt, G)
        m = np.where(a3, mn, m)
        v = np.where(a3, vn, v)
        t = np.where(acc, tn, t)
        J = np.where(acc, Jt, J)
        # a rejected step means the momentum no longer points downhill
        r3 = rej[:, None, None]
        m = np.where(r3, 0.0, m)
        v = np.where(r3, 0.0, v)
        t = np.where(rej, 0.0, t)
        lr = np.where(rej, 0.5 * lr, np.where(acc, np.minimum(cfg.lr, cfg.grow * lr), lr))
        if record_history:
            history.append(J.copy())
    return OCSolution(U, J, J0, it, infeasible, history)


def oc_step(model_params: EvaporatorParams, state: PlantState, yd_window, cfg: OCConfig, warm=None,
            record_history=False) -> OCSolution:
    """Optimise the next ``len(yd_window)`` inputs for one system."""
    yd_window = np.atleast_1d(np.asarray(yd_window, dtype=float))
    W = min(cfg.horizon, len(yd_window))
    if W < 1:
        raise ValueError("desired-output window must be non-empty")
    model = Evaporator(model_params, cfg.variant, cfg.substeps)
    X2, P2 = _broadcast_state(state, 1)
    if warm is None:
        warm = np.tile(np.asarray(STEADY_INPUT, dtype=float), (W, 1))
    U0 = np.asarray(warm, dtype=float)[:W][None]
    return solve_oc_batch(model, X2, P2, yd_window[None, :W], U0, cfg, record_history)


@dataclass
class RecedingResult:
    reference: np.ndarray     # [B, N]
    y_desired: np.ndarray
    y_closed: np.ndarray
    inputs: np.ndarray        # [B, N, 2]
    epsilon: np.ndarray       # [B]
    infeasible_count: np.ndarray
    step_times: np.ndarray    # [N] amortised seconds per draw
    iterations: np.ndarray    # [N]
    failed_at: np.ndarray     # [B] step of divergence, -1 if none


def run_receding_horizon_batch(systems, models, references, cfg: OCConfig, x0s=None, u_inits=None,
                               noises=None, refmodel: ReferenceModel = ReferenceModel()) -> RecedingResult:
    """Closed loop of each true system with an OC controller built on the
    matching model; the controller sees the true (noisy) state."""
    B = len(systems)
    R = np.asarray([np.asarray(getattr(r, "samples", r), dtype=float) for r in references])
    N = R.shape[1]
    x0s = x0s or [PlantState(*STEADY_STATE)] * B
    u_inits = u_inits or [PlantInput(*STEADY_INPUT)] * B
    true_plant = Evaporator(stack_params(systems), cfg.variant, cfg.substeps)
    model = Evaporator(stack_params(models), cfg.variant, cfg.substeps)
    X2 = np.array([float(dc.value_of(s.X2)) for s in x0s])
    P2 = np.array([float(dc.value_of(s.P2)) for s in x0s])
    u_prev = np.array([[float(dc.value_of(u.P100)), float(dc.value_of(u.F200))] for u in u_inits])
    yd = desired_output(refmodel, R, refmodel.initial_state(X2, R[:, 0]))
    H = cfg.horizon
    warm = np.repeat(u_prev[:, None, :], H, axis=1)
    ys = np.zeros((B, N))
    us = np.zeros((B, N, 2))
    infeasible = np.zeros(B, dtype=int)
    times = np.zeros(N)
    iters = np.zeros(N, dtype=int)
    failed = np.zeros(B, dtype=bool)
    failed_at = np.full(B, -1)
    for k in range(N):
        v = np.array([n.measurement(k) for n in noises]) if noises else np.zeros(B)
        ys[:, k] = X2 + v
        W = min(H, N - 1 - k)
        t0 = time.perf_counter()
        if W > 0:
            sol = solve_oc_batch(model, X2, P2, yd[:, k + 1:k + 1 + W], warm[:, :W], cfg)
            bad = sol.infeasible | ~np.isfinite(sol.objective)
            infeasible += bad
            u_apply = np.where(bad[:, None], u_prev, sol.inputs[:, 0])
            iters[k] = sol.iterations
            if cfg.warm_start:
                shifted = np.concatenate([sol.inputs[:, 1:], sol.inputs[:, -1:]], axis=1)
                pad = H - shifted.shape[1]
                if pad > 0:
                    shifted = np.concatenate([shifted, np.repeat(shifted[:, -1:], pad, axis=1)], axis=1)
                warm = np.where(bad[:, None, None], np.repeat(u_prev[:, None, :], H, axis=1), shifted)
            else:
                warm = np.repeat(u_prev[:, None, :], H, axis=1)
        else:
            u_apply = u_prev
        times[k] = (time.perf_counter() - t0) / B
        us[:, k] = u_apply
        w = np.array([n.process(k) for n in noises]) if noises else None
        with np.errstate(all="ignore"):
            nxt = true_plant.step(PlantState(X2, P2), PlantInput(u_apply[:, 0], u_apply[:, 1]),
                                  None if w is None else (w[:, 0], w[:, 1]))
        nX, nP = np.asarray(nxt.X2, dtype=float), np.asarray(nxt.P2, dtype=float)
        # a diverged row is frozen and reported; the rest of the batch goes on
        blown = ~(np.isfinite(nX) & np.isfinite(nP)) & ~failed
        failed_at[blown] = k
        failed |= blown
        X2, P2 = np.where(failed, X2, nX), np.where(failed, P2, nP)
        u_prev = u_apply
    eps = np.sqrt(np.sum((yd - ys) ** 2, axis=1))
    eps[failed] = np.nan
    return RecedingResult(R, yd, ys, us, eps, infeasible, times, iters, failed_at)


def run_receding_horizon(true_system: EvaporatorParams, model_params: EvaporatorParams, reference,
                         cfg: OCConfig, noise: NoiseStream | None = None, x0=None, u_init=None,
                         refmodel: ReferenceModel = ReferenceModel()) -> RecedingResult:
    return run_receding_horizon_batch([true_system], [model_params], [reference], cfg,
                                      [x0] if x0 else None, [u_init] if u_init else None,
                                      [noise] if noise else None, refmodel)


# -- grey-box identification --------------------------------------------------

@dataclass
class IdentDataset:
    inputs: np.ndarray    # [n, 2]
    outputs: np.ndarray   # [n]
    x0: tuple = STEADY_STATE


def excitation(rng: np.random.Generator, length: int, amplitude_range, step_length_range) -> np.ndarray:
    """Independent random step sequences for both input channels."""
    lo, hi = amplitude_range
    slo, shi = step_length_range
    cols = []
    for _ in range(2):
        vals = []
        while len(vals) < length:
            vals.extend([rng.uniform(lo, hi)] * int(rng.integers(slo, shi, endpoint=True)))
        cols.append(vals[:length])
    return np.array(cols).T


def generate_ident_data(system: EvaporatorParams, cfg: IdentConfig, rng: np.random.Generator,
                        noise: NoiseStream | None = None, x0=STEADY_STATE) -> IdentDataset:
    """Open-loop step-excitation experiment of ``cfg.length`` samples."""
    for attempt in range(2):
        u = excitation(rng, cfg.length, cfg.amplitude_range, cfg.step_length_range)
        try:
            with np.errstate(all="ignore"):
                _, y = simulate(system, PlantState(*x0), u, noise, cfg.variant, cfg.substeps)
        except (PlantDivergence, ValueError):
            if attempt:
                raise
            continue
        return IdentDataset(u, y, tuple(x0))
    raise PlantDivergence("identification experiment diverged twice")


def _simulate_batch(plant: Evaporator, x0, inputs):
    """Predicted outputs [B, n] (as a list of tensors) for inputs [B, n, 2]."""
    state = PlantState(x0[0], x0[1])
    ys = []
    for k in range(inputs.shape[1]):
        ys.append(state.X2)
        state = plant.step(state, PlantInput(inputs[:, k, 0], inputs[:, k, 1]))
    return ys


def ident_objective(theta, base: np.ndarray, datasets, cfg: IdentConfig):
    """Per-dataset mean squared simulation error; ``theta`` [B, 19] scales ``base``."""
    fields_ = [dc.mul(theta[:, i], base[i]) if isinstance(theta, dc.DTensor) else theta[:, i] * base[i]
               for i in range(base.size)]
    plant = Evaporator(EvaporatorParams(*fields_), cfg.variant, cfg.substeps)
    U = np.stack([d.inputs for d in datasets])
    Y = np.stack([d.outputs for d in datasets])
    x0 = (np.array([d.x0[0] for d in datasets]), np.array([d.x0[1] for d in datasets]))
    ys = _simulate_batch(plant, x0, U)
    acc = 0.0
    for k, yk in enumerate(ys):
        acc = dc.add(acc, dc.square(Y[:, k] - yk))
    return dc.mul(acc, 1.0 / U.shape[1])


@dataclass
class IdentReport:
    params: EvaporatorParams
    initial_objective: float
    final_objective: float
    steps: int
    stop_reason: str
    objective_trace: list
    train_rmse: float
    validation_rmse: float = float("nan")


def identify_greybox(datasets, cfg: IdentConfig = IdentConfig(), initial: EvaporatorParams | None = None,
                     validation=None) -> list:
    """Gradient-based fit of all 19 constants to each dataset.

    Parameters are optimised as multiplicative factors of ``initial`` with Adam
    on a cosine schedule; each problem stops on its own once its objective is
    below ``cfg.threshold``. The best iterate seen is returned, so the result
    is never worse than the initial guess.
    """
    initial = EvaporatorParams.consistent() if initial is None else initial
    base = initial.as_array()
    B = len(datasets)
    if B == 0:
        raise ValueError("no identification data")
    schedule = WarmRestartSchedule(cfg.lr, cfg.max_steps, 1)
    theta = np.ones((B, base.size))
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    lr_scale = np.ones(B)
    best = theta.copy()
    best_J = np.full(B, np.inf)
    J0 = None
    done = np.zeros(B, dtype=bool)
    reason = ["max_steps"] * B
    steps = np.zeros(B, dtype=int)
    traces = [[] for _ in range(B)]
    for it in range(cfg.max_steps + 1):
        tape = dc.Tape()
        leaf = tape.leaf(theta)
        with np.errstate(all="ignore"):
            try:
                J = ident_objective(leaf, base, datasets, cfg)
                Jv = np.array(dc.value_of(J), dtype=float)
            except ValueError:
                Jv = np.full(B, np.nan)
                J = None
            finite = np.isfinite(Jv)
            if J is not None and finite.any():
                g = tape.backward(dc.sum_(dc.mul(J, finite.astype(float))))[leaf]
                g = np.where(np.isfinite(g), g, 0.0)
            else:
                g = np.zeros_like(theta)
        tape.release()
        if J0 is None:
            J0 = Jv.copy()
        for b in range(B):
            if not done[b]:
                traces[b].append(float(Jv[b]))
        improved = finite & (Jv < best_J) & ~done
        best[improved] = theta[improved]
        best_J[improved] = Jv[improved]
        hit = finite & (Jv < cfg.threshold) & ~done
        for b in np.flatnonzero(hit):
            reason[b] = "threshold"
        done |= hit
        # non-finite iterate: back to the best point with a smaller step
        bad = ~finite & ~done
        theta[bad] = best[bad]
        lr_scale[bad] *= 0.5
        if done.all() or it == cfg.max_steps:
            break
        upd = ~done & finite
        lr = schedule(it)
        m = np.where(upd[:, None], BETA1 * m + (1 - BETA1) * g, m)
        v = np.where(upd[:, None], BETA2 * v + (1 - BETA2) * g * g, v)
        c1, c2 = 1 - BETA1 ** (it + 1), 1 - BETA2 ** (it + 1)
        step = (lr * lr_scale)[:, None] * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
        theta = np.where(upd[:, None], theta - step, theta)
        steps += upd
    reports = []
    for b in range(B):
        params = EvaporatorParams.from_array((best[b] * base).tolist())
        rep = IdentReport(params, float(J0[b]), float(best_J[b]), int(steps[b]), reason[b], traces[b],
                          math.sqrt(best_J[b]) if np.isfinite(best_J[b]) else float("nan"))
        if validation is not None:
            rep.validation_rmse = prediction_rmse(params, validation[b], cfg)
        reports.append(rep)
    return reports


def prediction_rmse(params: EvaporatorParams, data: IdentDataset, cfg: IdentConfig) -> float:
    with np.errstate(all="ignore"):
        try:
            _, y = simulate(params, PlantState(*data.x0), data.inputs, None, cfg.variant, cfg.substeps)
        except (PlantDivergence, ValueError):
            return float("nan")
    return float(np.sqrt(np.mean((y - data.outputs) ** 2)))
