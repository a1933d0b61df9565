"""Forced-circulation evaporator: algebraic chain, ODE, RK4 discretisation, noise.

All functions accept plain floats, numpy arrays (a leading batch of systems)
or :class:`~ctxctl.diffcore.DTensor` values for parameters, states and inputs,
so the same code serves plain simulation, batched simulation and
backpropagation through time.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import diffcore as dc
from .streams import stream

TS = 1.0
N_X, N_U, N_Y = 2, 2, 1

VARIANTS = ("consistent", "paper")

# config keys, in table order; dataclass field names differ only for lambda
PARAM_KEYS = ("a", "b", "c", "d", "e", "phi", "gamma", "h", "M", "C", "UA2", "Cp",
              "lambda", "lambda_s", "F1", "X1", "F3", "T1", "T200")

STEADY_STATE = (25.0, 49.743)
STEADY_INPUT = (191.713, 215.888)
CONSISTENT_GAMMA = 90.0


class PlantDomainError(ValueError):
    pass


class PlantDivergence(FloatingPointError):
    def __init__(self, message, step=None, partial=None):
        super().__init__(message)
        self.step = step
        self.partial = partial


@dataclass(frozen=True)
class EvaporatorParams:
    a: object = 0.5616
    b: object = 0.3126
    c: object = 48.43
    d: object = 0.507
    e: object = 55.0
    phi: object = 0.1538
    gamma: object = 55.0
    h: object = 0.16
    M: object = 20.0
    C: object = 4.0
    UA2: object = 6.84
    Cp: object = 0.07
    lambda_: object = 38.5
    lambda_s: object = 36.6
    F1: object = 10.0
    X1: object = 5.0
    F3: object = 50.0
    T1: object = 40.0
    T200: object = 25.0

    @classmethod
    def nominal(cls) -> "EvaporatorParams":
        """Table values exactly (gamma = 55)."""
        return cls()

    @classmethod
    def consistent(cls) -> "EvaporatorParams":
        """Nominal values with the steam-temperature intercept that makes the
        reference operating point a steady state."""
        return cls(gamma=CONSISTENT_GAMMA)

    @classmethod
    def preset(cls, name: str) -> "EvaporatorParams":
        if name == "consistent":
            return cls.consistent()
        if name in ("nominal", "table"):
            return cls.nominal()
        raise ValueError(f"unknown parameter preset {name!r}")

    def to_dict(self) -> dict:
        return {k: _plain(getattr(self, f.name)) for k, f in zip(PARAM_KEYS, fields(self))}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaporatorParams":
        unknown = set(d) - set(PARAM_KEYS)
        if unknown:
            raise KeyError(f"unknown evaporator parameter(s): {sorted(unknown)}")
        names = [f.name for f in fields(cls)]
        kw = {n: float(d[k]) for k, n in zip(PARAM_KEYS, names) if k in d}
        return cls(**kw)

    def as_array(self) -> np.ndarray:
        return np.array([dc.value_of(getattr(self, f.name)) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, values) -> "EvaporatorParams":
        return cls(*list(values))

    def replace(self, **kw) -> "EvaporatorParams":
        return replace(self, **kw)

    def validate(self):
        v = {k: np.asarray(dc.value_of(x)) for k, x in zip(PARAM_KEYS, self.values())}
        for k, x in v.items():
            if not np.all(np.isfinite(x)):
                raise PlantDomainError(f"parameter {k} is not finite")
        for k in ("M", "C", "lambda", "lambda_s", "Cp"):
            if np.any(v[k] <= 0):
                raise PlantDomainError(f"parameter {k} must be positive")
        if np.any(v["F1"] + v["F3"] <= 0):
            raise PlantDomainError("F1 + F3 must be positive")
        return self

    def values(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


def stack_params(plist) -> EvaporatorParams:
    """Batch several parameter sets along a leading axis."""
    arr = np.stack([p.as_array() for p in plist], axis=1)
    return EvaporatorParams.from_array(list(arr))


def _plain(x):
    x = dc.value_of(x)
    return float(x) if np.ndim(x) == 0 else np.asarray(x).tolist()


@dataclass(frozen=True)
class PlantState:
    X2: object
    P2: object

    def values(self) -> np.ndarray:
        return np.array([dc.value_of(self.X2), dc.value_of(self.P2)], dtype=float)

    def detach(self) -> "PlantState":
        return PlantState(dc.value_of(self.X2), dc.value_of(self.P2))


@dataclass(frozen=True)
class PlantInput:
    P100: object
    F200: object

    def values(self) -> np.ndarray:
        return np.array([dc.value_of(self.P100), dc.value_of(self.F200)], dtype=float)


@dataclass(frozen=True)
class NoiseSpec:
    process_var: tuple = (0.1, 0.1)
    measurement_var: float = 0.1
    enabled: bool = False

    def __post_init__(self):
        if min(self.process_var) < 0 or self.measurement_var < 0:
            raise ValueError("noise variances must be non-negative")

    @classmethod
    def off(cls) -> "NoiseSpec":
        return cls(enabled=False)

    @classmethod
    def test(cls) -> "NoiseSpec":
        return cls(enabled=True)


class NoiseStream:
    """Pre-sampled unit-variance normals keyed by (seed, trajectory, step).

    Samples are produced in fixed blocks, each from its own generator, so
    step ``k`` always sees the same numbers regardless of access order.
    """

    BLOCK = 256

    def __init__(self, spec: NoiseSpec, seed: int, *trajectory):
        self.spec = spec
        self.seed = seed
        self.trajectory = trajectory
        self._blocks: dict[int, np.ndarray] = {}
        self._pstd = np.sqrt(np.asarray(spec.process_var, dtype=float))
        self._mstd = math.sqrt(spec.measurement_var)

    def _row(self, k: int) -> np.ndarray:
        b = k // self.BLOCK
        blk = self._blocks.get(b)
        if blk is None:
            blk = stream(self.seed, "noise", *self.trajectory, b).standard_normal((self.BLOCK, 3))
            self._blocks[b] = blk
        return blk[k % self.BLOCK]

    def process(self, k: int) -> np.ndarray:
        if not self.spec.enabled:
            return np.zeros(2)
        return self._row(k)[:2] * self._pstd

    def measurement(self, k: int) -> float:
        if not self.spec.enabled:
            return 0.0
        return float(self._row(k)[2] * self._mstd)

    def digest(self, n: int) -> str:
        """Hash of the first ``n`` scaled samples (common-random-number audit)."""
        h = hashlib.sha256()
        for k in range(n):
            h.update(np.asarray(self.process(k), dtype=float).tobytes())
            h.update(np.float64(self.measurement(k)).tobytes())
        return h.hexdigest()[:16]


def _check_f200(F200):
    v = dc.value_of(F200)
    if np.any(~(np.asarray(v) > 0)):
        raise PlantDomainError("F200 must be positive")


def algebraic_chain(p: EvaporatorParams, state: PlantState, u: PlantInput) -> dict:
    """All intermediate flows and temperatures at one operating point."""
    _check_f200(u.F200)
    X2, P2 = state.X2, state.P2
    T2 = p.a * P2 + p.b * X2 + p.c
    T3 = p.d * P2 + p.e
    T100 = p.phi * u.P100 + p.gamma
    UA1 = p.h * (p.F1 + p.F3)
    Q100 = UA1 * (T100 - T2)
    F100 = Q100 / p.lambda_s
    F4 = (Q100 - p.F1 * p.Cp * (T2 - p.T1)) / p.lambda_
    divisor = 1.0 + p.UA2 / (2.0 * p.Cp * u.F200)
    if np.any(np.asarray(dc.value_of(divisor)) == 0):
        raise PlantDomainError("condenser divisor vanished")
    Q200 = p.UA2 * (T3 - p.T200) / divisor
    F5 = Q200 / p.lambda_
    F2 = p.F1 - F4
    return dict(T2=T2, T3=T3, T100=T100, Q100=Q100, UA1=UA1, F100=F100,
                Q200=Q200, F2=F2, F4=F4, F5=F5)


def derivative(p: EvaporatorParams, state: PlantState, u: PlantInput, variant: str = "consistent"):
    """(dX2/dt, dP2/dt) evaluated through the full algebraic chain."""
    q = algebraic_chain(p, state, u)
    if variant == "consistent":
        dX2 = (p.F1 * p.X1 - q["F2"] * state.X2) / p.M
        dP2 = (q["F4"] - q["F5"]) / p.C
    elif variant == "paper":
        dX2 = (p.F1 * state.X2 + q["F2"] * state.P2) / p.M
        dP2 = (q["F4"] + q["F5"]) / p.C
    else:
        raise ValueError(f"unknown dynamics variant {variant!r}")
    return dX2, dP2


class Evaporator:
    """Discrete-time evaporator with parameter-only terms hoisted.

    The right-hand side is the algebraic chain rearranged so that F4 and F5
    are affine in (X2, P2) given the input: F4 = q4 - k4*T2 and
    F5 = g5*(d*P2 + e - T200). This keeps recorded tapes short; tests check
    it against :func:`derivative`.
    """

    def __init__(self, params: EvaporatorParams, variant: str = "consistent",
                 substeps: int = 4, ts: float = TS):
        if variant not in VARIANTS:
            raise ValueError(f"unknown dynamics variant {variant!r}")
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        p = params
        self.params = p
        self.variant = variant
        self.substeps = substeps
        self.ts = ts
        ua1 = p.h * (p.F1 + p.F3)
        f1cp = p.F1 * p.Cp
        self._ua1_lam = ua1 / p.lambda_
        self._f1cpT1_lam = f1cp * p.T1 / p.lambda_
        self._k4 = (ua1 + f1cp) / p.lambda_
        self._ua2_lam = p.UA2 / p.lambda_
        self._ua2_2cp = p.UA2 / (2.0 * p.Cp)
        self._e_T200 = p.e - p.T200
        self._F1X1 = p.F1 * p.X1
        self._invM = 1.0 / p.M
        self._invC = 1.0 / p.C
        # coefficients of the hoisted right-hand side, in _rhs_vjp order
        self._coef = (p.a, p.b, p.c, p.d, self._e_T200, self._k4, self._F1X1, p.F1, self._invM, self._invC)
        self._coef_on_tape = any(isinstance(x, dc.DTensor) and x.tape is not None for x in self._coef)
        self._coef_values = tuple(dc.value_of(x) for x in self._coef)

    def input_terms(self, u: PlantInput):
        _check_f200(u.F200)
        p = self.params
        T100 = p.phi * u.P100 + p.gamma
        q4 = self._ua1_lam * T100 + self._f1cpT1_lam
        g5 = self._ua2_lam / (1.0 + self._ua2_2cp / u.F200)
        return q4, g5

    def rhs(self, X2, P2, q4, g5):
        p = self.params
        T2 = p.a * P2 + p.b * X2 + p.c
        F4 = q4 - self._k4 * T2
        F5 = g5 * (p.d * P2 + self._e_T200)
        if self.variant == "consistent":
            dX2 = (self._F1X1 - (p.F1 - F4) * X2) * self._invM
            dP2 = (F4 - F5) * self._invC
        else:
            dX2 = (p.F1 * X2 + (p.F1 - F4) * P2) * self._invM
            dP2 = (F4 + F5) * self._invC
        return dX2, dP2

    def step(self, state: PlantState, u: PlantInput, w=None, horizon: float | None = None) -> PlantState:
        """Integrate one sampling period with classical RK4, then add ``w``.

        When anything is recorded on a tape the whole period becomes a single
        fused node with a hand-written adjoint; otherwise plain arithmetic.
        """
        T = self.ts if horizon is None else horizon
        X, P = state.X2, state.P2
        if T > 0:
            q4, g5 = self.input_terms(u)
            if self._coef_on_tape or any(isinstance(x, dc.DTensor) and x.tape is not None
                                         for x in (X, P, q4, g5)):
                X, P = self._fused_step(X, P, q4, g5, T)
                if w is not None:
                    X = X + w[0]
                    P = P + w[1]
                return PlantState(X, P)
            h = T / self.substeps
            h2, h6 = 0.5 * h, h / 6.0
            f = self.rhs
            for _ in range(self.substeps):
                k1x, k1p = f(X, P, q4, g5)
                k2x, k2p = f(X + h2 * k1x, P + h2 * k1p, q4, g5)
                k3x, k3p = f(X + h2 * k2x, P + h2 * k2p, q4, g5)
                k4x, k4p = f(X + h * k3x, P + h * k3p, q4, g5)
                X = X + h6 * (k1x + k4x + 2.0 * (k2x + k3x))
                P = P + h6 * (k1p + k4p + 2.0 * (k2p + k3p))
        if w is not None:
            X = X + w[0]
            P = P + w[1]
        return PlantState(X, P)

    def measure(self, state: PlantState, v=0.0):
        return state.X2 + v if np.any(v) else state.X2

    # -- fused RK4 node -------------------------------------------------------

    def _rhs_values(self, x, p, q4, g5):
        a, b, c, d, eT, k4, F1X1, F1, invM, invC = self._coef_values
        T2 = a * p + b * x + c
        F4 = q4 - k4 * T2
        F5 = g5 * (d * p + eT)
        if self.variant == "consistent":
            return (F1X1 - (F1 - F4) * x) * invM, (F4 - F5) * invC
        return (F1 * x + (F1 - F4) * p) * invM, (F4 + F5) * invC

    def _rhs_vjp(self, x, p, q4, g5, lx, lp, acc, need_coef):
        """Pull (lx, lp) back through the right-hand side at (x, p).

        Returns cotangents of (x, p) and adds those of q4, g5 and, when
        ``need_coef``, of the ten coefficients into ``acc``.
        """
        a, b, c, d, eT, k4, F1X1, F1, invM, invC = self._coef_values
        T2 = a * p + b * x + c
        F4 = q4 - k4 * T2
        dpe = d * p + eT
        F5 = g5 * dpe
        D = F1 - F4
        Ab = lx * invM
        if self.variant == "consistent":
            F4b = lp * invC
            F5b = -F4b
            Db = -Ab * x
            xb = -Ab * D
            pb = 0.0
            if need_coef:
                acc[6] += Ab
                acc[8] += lx * (F1X1 - D * x)
                acc[9] += lp * (F4 - F5)
        else:
            F4b = lp * invC
            F5b = F4b
            Db = Ab * p
            xb = Ab * F1
            pb = Ab * D
            if need_coef:
                acc[7] += Ab * x
                acc[8] += lx * (F1 * x + D * p)
                acc[9] += lp * (F4 + F5)
        F4b = F4b - Db
        T2b = -F4b * k4
        acc[10] += F4b
        acc[11] += F5b * dpe
        g5F5b = F5b * g5
        if need_coef:
            acc[7] += Db
            acc[0] += T2b * p
            acc[1] += T2b * x
            acc[2] += T2b
            acc[3] += g5F5b * p
            acc[4] += g5F5b
            acc[5] -= F4b * T2
        return xb + T2b * b, pb + T2b * a + g5F5b * d

    def _fused_step(self, X, P, q4, g5, T):
        n = self.substeps
        h = T / n
        h2, h6 = 0.5 * h, h / 6.0
        xv, pv = dc.value_of(X), dc.value_of(P)
        qv, gv = dc.value_of(q4), dc.value_of(g5)
        f = self._rhs_values
        stages = []
        for _ in range(n):
            x1, p1 = xv, pv
            k1x, k1p = f(x1, p1, qv, gv)
            x2, p2 = xv + h2 * k1x, pv + h2 * k1p
            k2x, k2p = f(x2, p2, qv, gv)
            x3, p3 = xv + h2 * k2x, pv + h2 * k2p
            k3x, k3p = f(x3, p3, qv, gv)
            x4, p4 = xv + h * k3x, pv + h * k3p
            k4x, k4p = f(x4, p4, qv, gv)
            stages.append(((x1, p1), (x2, p2), (x3, p3), (x4, p4)))
            xv = xv + h6 * (k1x + k4x + 2.0 * (k2x + k3x))
            pv = pv + h6 * (k1p + k4p + 2.0 * (k2p + k3p))
        out = np.stack(np.broadcast_arrays(xv, pv))
        inputs = (X, P, q4, g5) + self._coef
        need_coef = self._coef_on_tape
        shapes = [np.shape(dc.value_of(x)) for x in inputs]
        cache = [None, None]
        vjp_rhs = self._rhs_vjp

        def adjoint(g):
            if cache[0] is g:
                return cache[1]
            acc = [0.0] * 12
            lx, lp = g[0], g[1]
            for st in reversed(stages):
                (x1, p1), (x2, p2), (x3, p3), (x4, p4) = st
                # stage 4 receives h6 from the update; earlier stages also
                # receive the pull-back of the next stage's argument
                ax, ap = vjp_rhs(x4, p4, qv, gv, h6 * lx, h6 * lp, acc, need_coef)
                nx, np_ = lx + ax, lp + ap
                ax, ap = vjp_rhs(x3, p3, qv, gv, 2 * h6 * lx + h * ax, 2 * h6 * lp + h * ap, acc, need_coef)
                nx, np_ = nx + ax, np_ + ap
                ax, ap = vjp_rhs(x2, p2, qv, gv, 2 * h6 * lx + h2 * ax, 2 * h6 * lp + h2 * ap, acc, need_coef)
                nx, np_ = nx + ax, np_ + ap
                ax, ap = vjp_rhs(x1, p1, qv, gv, h6 * lx + h2 * ax, h6 * lp + h2 * ap, acc, need_coef)
                lx, lp = nx + ax, np_ + ap
            # coefficient slots 0..9 follow the input tuple after (X, P, q4, g5)
            res = [lx, lp, acc[10], acc[11]] + acc[:10]
            res = [dc._unbroadcast(np.asarray(r, dtype=float) + np.zeros(out.shape[1:]), sh)
                   for r, sh in zip(res, shapes)]
            cache[0], cache[1] = g, res
            return res

        vjps = [(lambda g, i=i: adjoint(g)[i]) for i in range(len(inputs))]
        node = dc.record("rk4", inputs, out, vjps)
        return node[0], node[1]


def step(params: EvaporatorParams, state: PlantState, u: PlantInput, noise: NoiseStream | None = None,
         k: int = 0, variant: str = "consistent", substeps: int = 4) -> PlantState:
    """One sampling period; process noise from ``noise`` at step ``k`` if enabled."""
    plant = Evaporator(params, variant, substeps)
    w = noise.process(k) if noise is not None and noise.spec.enabled else None
    nxt = plant.step(state, u, w)
    check_finite(nxt, k)
    return nxt


def measure(state: PlantState, noise: NoiseStream | None = None, k: int = 0):
    v = noise.measurement(k) if noise is not None else 0.0
    return state.X2 + v if v else state.X2


def check_finite(state: PlantState, k: int, partial=None):
    x = np.asarray(dc.value_of(state.X2))
    p = np.asarray(dc.value_of(state.P2))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
        raise PlantDivergence(f"plant state became non-finite at step {k}", step=k, partial=partial)


def simulate(params: EvaporatorParams, x0: PlantState, inputs, noise: NoiseStream | None = None,
             variant: str = "consistent", substeps: int = 4):
    """Open-loop run; returns (states [N+1, 2], outputs [N]) as arrays."""
    plant = Evaporator(params, variant, substeps)
    state = x0
    states = [state.values()]
    ys = []
    for k, u in enumerate(np.asarray(inputs, dtype=float)):
        v = noise.measurement(k) if noise is not None else 0.0
        ys.append(float(dc.value_of(state.X2)) + v)
        w = noise.process(k) if noise is not None and noise.spec.enabled else None
        state = plant.step(state, PlantInput(u[0], u[1]), w)
        check_finite(state, k)
        states.append(state.values())
    return np.array(states), np.array(ys)
