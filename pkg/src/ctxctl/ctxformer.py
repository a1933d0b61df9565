"""Contextual controller: causal decoder-only Transformer plus a PID output head.

Each token is ``[e_k, u_{k-1}]`` (tracking error and previous input). The
Transformer reads the last ``n_ctx`` tokens; only the last position is
projected to an input correction. Three scalar gains add a parallel PID term
on the raw error, shared by both input channels, and the result is offset by
a fixed bias input.

Weights are plain ``name -> ndarray`` mappings. Binding them to a tape as
leaves (:func:`bind`) makes every output differentiable; passing the arrays
directly runs inference with no tape.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .plant import STEADY_INPUT, TS

CHECKPOINT_VERSION = 1


class NonFiniteActivation(FloatingPointError):
    def __init__(self, layer):
        super().__init__(f"non-finite activation after layer {layer}")
        self.layer = layer


@dataclass
class ControllerConfig:
    n_layers: int = 2
    n_heads: int = 2
    n_ctx: int = 100
    d_model: int = 32
    token_dim: int = 3
    out_dim: int = 2
    mlp_expansion: int = 4
    positional: str = "learned"
    error_scale: float = 5.0
    input_scale: float = 50.0
    u_bias: tuple = STEADY_INPUT
    init_std: float = 0.02
    ts: float = TS

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_ctx < 1:
            raise ValueError("n_ctx must be >= 1")
        if self.positional != "learned":
            raise ValueError(f"unsupported positional encoding {self.positional!r}")
        self.u_bias = tuple(float(v) for v in self.u_bias)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ControllerConfig":
        base = {"desk": dict(n_layers=2, n_heads=2, n_ctx=100, d_model=32),
                "paper": dict(n_layers=8, n_heads=4, n_ctx=100, d_model=128)}
        if name not in base:
            raise ValueError(f"unknown preset {name!r}")
        return cls(**{**base[name], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["u_bias"] = list(self.u_bias)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerConfig":
        return cls(**d)


@dataclass
class Context:
    """errors e_0..e_k and inputs u_{-1}..u_{k-1} (pairs)."""

    errors: list = field(default_factory=list)
    inputs: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.errors) != len(self.inputs):
            raise ValueError("context needs one previous input per error sample")

    def __len__(self):
        return len(self.errors)


def param_shapes(cfg: ControllerConfig) -> dict:
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_expansion
    shapes = {"emb.w": (cfg.token_dim, d), "emb.b": (d,), "pos": (cfg.n_ctx, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wqkv": (d, 3 * d), p + "attn.bqkv": (3 * d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, hid), p + "mlp.b1": (hid,),
            p + "mlp.w2": (hid, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "head.w": (d, cfg.out_dim), "head.b": (cfg.out_dim,),
                   "pid.Kp": (), "pid.Ki": (), "pid.Kd": ()})
    return shapes


def count_params(cfg: ControllerConfig) -> int:
    """Closed-form parameter count (including the three PID gains)."""
    d, m = cfg.d_model, cfg.mlp_expansion
    per_layer = (3 * d * d + 3 * d) + (d * d + d) + 2 * (m * d * d) + m * d + d + 4 * d
    return ((cfg.token_dim + 1) * d + cfg.n_ctx * d + cfg.n_layers * per_layer
            + 2 * d + (d + 1) * cfg.out_dim + 3)


def init_weights(cfg: ControllerConfig, rng: np.random.Generator) -> dict:
    """Small Gaussian init; output projection and PID gains start at zero."""
    w = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith(("head.", "pid.")) or leaf in ("b", "bqkv", "bo", "b1", "b2"):
            w[name] = np.zeros(shape)
        elif leaf == "g":
            w[name] = np.ones(shape)
        else:
            w[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return w


def bind(weights: dict, tape: dc.Tape) -> dict:
    return {k: tape.leaf(v) for k, v in weights.items()}


_MASKS: dict = {}


def _causal_mask(T):
    m = _MASKS.get(T)
    if m is None:
        m = _MASKS[T] = np.tril(np.ones((T, T), dtype=bool))
    return m


def trunk(w: dict, cfg: ControllerConfig, tokens, all_positions: bool = False):
    """Transformer part: normalised tokens [T, 3] -> correction of shape [2].

    With ``all_positions`` every position's correction is returned ([T, 2]);
    row t then only depends on tokens 0..t.
    """
    T = tokens.shape[0]
    if T > cfg.n_ctx:
        tokens = tokens[T - cfg.n_ctx:]
        T = cfg.n_ctx
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H
    scale = 1.0 / math.sqrt(dh)
    mask = _causal_mask(T)
    x = dc.matmul(tokens, w["emb.w"]) + w["emb.b"] + dc.slice_(w["pos"], slice(0, T))
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        final = i == cfg.n_layers - 1 and not all_positions
        a = dc.layernorm(x, w[p + "ln1.g"], w[p + "ln1.b"])
        qkv = dc.matmul(a, w[p + "attn.wqkv"]) + w[p + "attn.bqkv"]
        # the last layer only feeds the last position into the head
        rows = slice(T - 1, T) if final else slice(None)
        m = mask[T - 1:T] if final else mask
        heads = []
        for hd in range(H):
            q = qkv[rows, hd * dh:(hd + 1) * dh]
            k = qkv[:, d + hd * dh:d + (hd + 1) * dh]
            v = qkv[:, 2 * d + hd * dh:2 * d + (hd + 1) * dh]
            att = dc.softmax(dc.matmul(q, dc.transpose(k)) * scale, m)
            heads.append(dc.matmul(att, v))
        o = heads[0] if H == 1 else dc.concat(heads, axis=1)
        if final:
            x = x[T - 1:T]
        x = x + dc.matmul(o, w[p + "attn.wo"]) + w[p + "attn.bo"]
        a = dc.layernorm(x, w[p + "ln2.g"], w[p + "ln2.b"])
        hmid = dc.gelu(dc.matmul(a, w[p + "mlp.w1"]) + w[p + "mlp.b1"])
        x = x + dc.matmul(hmid, w[p + "mlp.w2"]) + w[p + "mlp.b2"]
        if not np.all(np.isfinite(dc.value_of(x))):
            raise NonFiniteActivation(i)
    last = dc.layernorm(x if all_positions else x[x.shape[0] - 1], w["lnf.g"], w["lnf.b"])
    return (dc.matmul(last, w["head.w"]) + w["head.b"]) * cfg.input_scale


def pid_term(w: dict, cfg: ControllerConfig, e_k, e_prev, e_sum):
    """Parallel PID on the error; gains act on error/error_scale and return
    input/input_scale units."""
    gain = cfg.input_scale / cfg.error_scale
    ts = cfg.ts
    p = w["pid.Kp"] * e_k
    i = w["pid.Ki"] * (ts * e_sum)
    dd = w["pid.Kd"] * ((e_k - e_prev) * (1.0 / ts))
    return (p + i + dd) * gain


def combine(cfg: ControllerConfig, u_tf, u_pid):
    return u_tf + u_pid * np.ones(cfg.out_dim) + np.asarray(cfg.u_bias)


def token(cfg: ControllerConfig, e, u_prev):
    """One normalised token row of shape [1, 3]."""
    en = dc.slice_(e * (1.0 / cfg.error_scale), (None, None)) if _is_scalar(e) else e
    un = (u_prev - np.asarray(cfg.u_bias)) * (1.0 / cfg.input_scale)
    return dc.concat([en, dc.slice_(un, (None, slice(None)))], axis=1)


def _is_scalar(x):
    return np.ndim(dc.value_of(x)) == 0


def _as_pair(u):
    if isinstance(u, dc.DTensor):
        return u
    if hasattr(u, "P100"):
        if isinstance(u.P100, dc.DTensor) or isinstance(u.F200, dc.DTensor):
            return dc.concat([dc.slice_(u.P100, (None,)), dc.slice_(u.F200, (None,))])
        return np.array([u.P100, u.F200], dtype=float)
    return np.asarray(u, dtype=float)


def forward(w: dict, cfg: ControllerConfig, context: Context):
    """Control input u_k [2] for the full context (differentiable)."""
    if len(context) == 0:
        raise ValueError("context must be non-empty")
    errs = context.errors
    for e in errs:
        if not np.all(np.isfinite(dc.value_of(e))):
            raise ValueError("context contains non-finite entries")
    rows = [token(cfg, e, _as_pair(u)) for e, u in zip(errs, context.inputs)]
    tokens = rows[0] if len(rows) == 1 else dc.concat(rows, axis=0)
    u_tf = trunk(w, cfg, tokens)
    e_k = errs[-1]
    e_prev = errs[-2] if len(errs) > 1 else errs[-1]
    e_sum = errs[0]
    for e in errs[1:]:
        e_sum = dc.add(e_sum, e)
    return combine(cfg, u_tf, pid_term(w, cfg, e_k, e_prev, e_sum))


class ContextBuffer:
    """Incrementally grown context used inside closed-loop rollouts."""

    def __init__(self, cfg: ControllerConfig, u_init):
        self.cfg = cfg
        self.u_prev = _as_pair(u_init)
        self.tokens = None
        self.e_prev = None
        self.e_sum = None
        self.length = 0

    def push(self, e):
        row = token(self.cfg, e, self.u_prev)
        self.tokens = row if self.tokens is None else dc.concat([self.tokens, row], axis=0)
        if self.tokens.shape[0] > self.cfg.n_ctx:
            self.tokens = self.tokens[1:]
        self.e_sum = e if self.e_sum is None else dc.add(self.e_sum, e)
        self.length += 1
        return self

    def output(self, w: dict, e_k):
        e_prev = self.e_prev if self.e_prev is not None else e_k
        u = combine(self.cfg, trunk(w, self.cfg, self.tokens), pid_term(w, self.cfg, e_k, e_prev, self.e_sum))
        self.e_prev = e_k
        self.u_prev = u
        return u


def save_checkpoint(path, weights: dict, cfg: ControllerConfig, seed: int = 0, stage: int = 0,
                    extra_arrays: dict | None = None, meta: dict | None = None):
    """npz container: ``w/<name>`` tensors, optional ``x/<name>`` arrays and a
    JSON ``__meta__`` record (version, config, seed, stage)."""
    record = {"version": CHECKPOINT_VERSION, "config": cfg.to_dict(), "seed": int(seed),
              "stage": int(stage), "names": list(weights), "meta": meta or {}}
    arrays = {f"w/{k}": np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"x/{k}"] = np.asarray(v)
    arrays["__meta__"] = np.array(json.dumps(record))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Returns (weights, config, record, extra_arrays)."""
    with np.load(path, allow_pickle=False) as z:
        record = json.loads(str(z["__meta__"]))
        if record.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {record.get('version')!r}")
        weights = {k: np.array(z[f"w/{k}"]) for k in record["names"]}
        extra = {k[2:]: np.array(z[k]) for k in z.files if k.startswith("x/")}
    return weights, ControllerConfig.from_dict(record["config"]), record, extra
