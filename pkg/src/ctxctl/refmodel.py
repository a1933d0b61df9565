"""First-order reference model and random step references."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ReferenceModel:
    """x[k+1] = a_m x[k] + b_m r[k];  y_d[k] = c_m x[k] + d_m r[k]."""

    a_m: float = 0.4286
    b_m: float = 0.7143
    c_m: float = 0.5669
    d_m: float = 0.2914

    def __post_init__(self):
        if not abs(self.a_m) < 1:
            raise ValueError(f"reference model must be stable, got a_m={self.a_m}")

    @property
    def dc_gain(self) -> float:
        return self.c_m * self.b_m / (1.0 - self.a_m) + self.d_m

    def initial_state(self, y0, r0):
        """State that makes y_d[0] equal ``y0`` for reference sample ``r0``."""
        return (np.asarray(y0, dtype=float) - self.d_m * np.asarray(r0, dtype=float)) / self.c_m


def desired_output(model: ReferenceModel, reference, x0M=0.0) -> np.ndarray:
    """Desired output for reference samples along the last axis."""
    r = np.asarray(reference, dtype=float)
    x = np.asarray(x0M, dtype=float) * np.ones(r.shape[:-1])
    yd = np.empty_like(r)
    for k in range(r.shape[-1]):
        rk = r[..., k]
        yd[..., k] = model.c_m * x + model.d_m * rk
        x = model.a_m * x + model.b_m * rk
    return yd


@dataclass
class ReferenceSignal:
    samples: np.ndarray
    levels: list = field(default_factory=list)
    durations: list = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)

    def __len__(self):
        return len(self.samples)

    @property
    def N(self) -> int:
        return len(self.samples)

    @classmethod
    def constant(cls, level: float, N: int) -> "ReferenceSignal":
        return cls(np.full(N, float(level)), [float(level)], [N])

    def to_dict(self) -> dict:
        return {"samples": self.samples.tolist(), "levels": list(map(float, self.levels)),
                "durations": list(map(int, self.durations))}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferenceSignal":
        return cls(np.asarray(d["samples"], dtype=float), list(d.get("levels", [])), list(d.get("durations", [])))


def sample_reference(rng: np.random.Generator, N: int = 100, amplitude_range=(20.0, 25.0),
                     duration_range=(20, 50)) -> ReferenceSignal:
    """Piecewise-constant reference: uniform levels, uniform integer durations [s]."""
    if N <= 0:
        raise ValueError("horizon N must be positive")
    lo, hi = map(float, amplitude_range)
    dlo, dhi = map(int, duration_range)
    if not lo < hi:
        raise ValueError(f"degenerate amplitude range {amplitude_range}")
    if dlo < 1 or dhi < dlo:
        raise ValueError(f"degenerate duration range {duration_range}")
    levels, durations, parts = [], [], []
    filled = 0
    while filled < N:
        level = rng.uniform(lo, hi)
        dur = int(rng.integers(dlo, dhi, endpoint=True))
        take = min(dur, N - filled)
        levels.append(level)
        durations.append(dur)
        parts.append(np.full(take, level))
        filled += take
    return ReferenceSignal(np.concatenate(parts), levels, durations)


def write_reference_csv(path, reference, yd):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "r", "y_d"])
        for k, (r, y) in enumerate(zip(np.asarray(reference), np.asarray(yd))):
            w.writerow([k, repr(float(r)), repr(float(y))])
