"""Adam with a cosine warm-restart learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class WarmRestartSchedule:
    """Cosine annealing restarted after ``period`` steps, period grown by ``mult``."""

    lr: float = 1e-4
    period: int = 1000
    mult: int = 2
    lr_min: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.period < 1 or self.mult < 1:
            raise ValueError("restart period and multiplier must be >= 1")

    def __call__(self, step: int) -> float:
        t, period = step, self.period
        while t >= period:
            t -= period
            period *= self.mult
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * t / period))


class Adam:
    def __init__(self, schedule: WarmRestartSchedule, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=1.0):
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    @property
    def lr(self) -> float:
        return self.schedule(self.t)

    def step(self, params: dict, grads: dict) -> tuple[dict, float]:
        """Returns (new params, global gradient norm before clipping)."""
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        lr = self.schedule(self.t)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            g = g * scale
            m = b1 * self.m.get(k, 0.0) + (1.0 - b1) * g
            v = b2 * self.v.get(k, 0.0) + (1.0 - b2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out, norm

    def state_arrays(self) -> dict:
        arrays = {f"m/{k}": np.asarray(v) for k, v in self.m.items()}
        arrays.update({f"v/{k}": np.asarray(v) for k, v in self.v.items()})
        arrays["t"] = np.array(self.t)
        return arrays

    def load_state_arrays(self, arrays: dict):
        self.m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: v for k, v in arrays.items() if k.startswith("v/")}
        self.t = int(arrays.get("t", 0))
