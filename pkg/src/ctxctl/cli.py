"""Command-line entry point: ``ctxctl <command> [options]``.

Failures print one JSON object ``{"error": ..., "message": ...}`` on stderr
and exit nonzero (2 usage/config, 3 missing artifact, 1 anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import ctxformer as cf
from . import diffcore as dc
from .baselines import generate_ident_data, identify_greybox
from .cltrain import ConstantPolicy, TransformerPolicy, rollout_closed_loop, rss_and_grad, run_curriculum
from .config import ConfigError, load_config
from .evalharness import TestProtocol, run_test_suite, write_trajectory_csv
from .metasample import DistributionConfig, sample_draw, write_jsonl
from .plant import STEADY_INPUT, STEADY_STATE, Evaporator, EvaporatorParams, NoiseStream, PlantInput, PlantState
from .streams import stream

EXIT_FAIL, EXIT_USAGE, EXIT_MISSING = 1, 2, 3


class MissingArtifact(FileNotFoundError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        self.exit(EXIT_USAGE)


def _emit_error(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="YAML config file")
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--preset", choices=("desk", "paper"), default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxctl", description="Contextual controller for the evaporator benchmark.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="closed loop on one sampled system, CSV trajectory")
    _global_flags(p, suppress=True)
    p.add_argument("--index", type=int, default=0, help="draw index")
    p.add_argument("--checkpoint", help="use the contextual controller instead of constant input")
    p.add_argument("--no-noise", action="store_true")

    p = sub.add_parser("sample-meta", help="write meta-dataset draws as JSON lines")
    _global_flags(p, suppress=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--scope", default="train")

    p = sub.add_parser("train", help="run the curriculum, write checkpoints and losses.csv")
    _global_flags(p, suppress=True)
    p.add_argument("--max-iters", type=int, help="override every stage's iteration budget")
    p.add_argument("--stages", help="comma-separated stage indices, e.g. 1,2")

    p = sub.add_parser("eval", help="test protocol on fresh systems")
    _global_flags(p, suppress=True)
    p.add_argument("--checkpoint", help="controller checkpoint (default <out>/controller.npz)")
    p.add_argument("--controllers", help="comma-separated, e.g. ctx,oracle-5,id-5")
    p.add_argument("--n-systems", type=int)

    p = sub.add_parser("baseline", help="oracle / identification-based OC only")
    _global_flags(p, suppress=True)
    p.add_argument("--kind", choices=("oc", "ident", "both"), default="both")
    p.add_argument("--horizon", type=int, action="append", help="OC horizon (repeatable)")
    p.add_argument("--n-systems", type=int)

    p = sub.add_parser("check", help="gradient, steady-state and causality self-tests")
    _global_flags(p, suppress=True)
    return parser


def _out_dir(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _protocol(cfg, args, controllers=None) -> TestProtocol:
    p = cfg.protocol
    return TestProtocol(n_systems=args.n_systems or p.n_systems, seed=p.seed, horizon=p.horizon, noise=p.noise,
                        controllers=tuple(controllers or p.controllers), scope=p.scope,
                        distribution=p.distribution, refmodel=p.refmodel)


def cmd_simulate(cfg, args):
    out = _out_dir(args, "out")
    dist = cfg.distribution
    draw = sample_draw(cfg.seed, args.index, dist, scope="simulate")
    if args.checkpoint:
        if not os.path.exists(args.checkpoint):
            raise MissingArtifact(f"checkpoint not found: {args.checkpoint}")
        weights, ccfg, _, _ = cf.load_checkpoint(args.checkpoint)
        policy = TransformerPolicy(weights, ccfg)
    else:
        policy = ConstantPolicy(draw.u_init)
    spec = cfg.noise
    noise = None if args.no_noise else NoiseStream(spec, cfg.seed, "simulate", args.index)
    rec = rollout_closed_loop(draw.system, draw.reference, draw.x0, draw.u_init, policy, noise, cfg.refmodel,
                              cfg.variant, cfg.substeps)
    path = os.path.join(out, "simulate.csv")
    write_trajectory_csv(path, {"r": rec.reference, "y_d": rec.y_desired, "y_cl": rec.y_closed,
                                "u": rec.inputs})
    return {"csv": path, "rss": rec.rss_value}


def cmd_sample_meta(cfg, args):
    out = _out_dir(args, "out")
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    draws = [sample_draw(cfg.seed, i, cfg.distribution, scope=args.scope) for i in range(args.count)]
    path = os.path.join(out, "meta.jsonl")
    write_jsonl(path, draws)
    return {"jsonl": path, "count": len(draws)}


def cmd_train(cfg, args):
    out = _out_dir(args, "out")
    tcfg = cfg.train
    if args.stages:
        keep = {int(s) for s in args.stages.split(",")}
        tcfg.stages = [s for s in tcfg.stages if s.index in keep]
    if args.max_iters is not None:
        for s in tcfg.stages:
            s.max_iters = args.max_iters
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        fh.write(cfg.dump())
    _, results = run_curriculum(tcfg, out_dir=out)
    return {"checkpoint": os.path.join(out, "controller.npz"), "losses": os.path.join(out, "losses.csv"),
            "stages": [{"stage": r.stage, "iterations": r.iterations, "converged": r.converged,
                        "validation_mrmse": r.validation_mrmse} for r in results]}


def cmd_eval(cfg, args):
    out = _out_dir(args, "out")
    controllers = args.controllers.split(",") if args.controllers else None
    protocol = _protocol(cfg, args, controllers)
    checkpoint = None
    if "ctx" in protocol.controllers:
        checkpoint = args.checkpoint or os.path.join(out, "controller.npz")
        if not os.path.exists(checkpoint):
            raise MissingArtifact(f"checkpoint not found: {checkpoint}")
    stats, _ = run_test_suite(protocol, checkpoint, cfg.oc, cfg.ident, out_dir=out)
    return {"summary": os.path.join(out, "summary.csv"), "median_epsilon": {
        k: v.get("median") for k, v in stats.box.items()}}


def cmd_baseline(cfg, args):
    out = _out_dir(args, "out")
    horizons = args.horizon or [cfg.oc.horizon]
    if args.kind == "ident":
        protocol = _protocol(cfg, args)
        return _ident_only(cfg, protocol, out)
    names = [f"oracle-{h}" for h in horizons]
    if args.kind == "both":
        names += [f"id-{h}" for h in horizons]
    protocol = _protocol(cfg, args, names)
    stats, _ = run_test_suite(protocol, None, cfg.oc, cfg.ident, out_dir=out)
    return {"summary": os.path.join(out, "summary.csv"), "median_epsilon": {
        k: v.get("median") for k, v in stats.box.items()}}


def _ident_only(cfg, protocol, out):
    draws = protocol.draws()
    data = [generate_ident_data(d.system, cfg.ident, stream(protocol.seed, "ident", i),
                                NoiseStream(protocol.noise, protocol.seed, "ident", i)) for i, d in enumerate(draws)]
    val = [generate_ident_data(d.system, cfg.ident, stream(protocol.seed, "ident-val", i),
                               NoiseStream(protocol.noise, protocol.seed, "ident-val", i)) for i, d in enumerate(draws)]
    reports = identify_greybox(data, cfg.ident, cfg.distribution.base, val)
    path = os.path.join(out, "identification.jsonl")
    with open(path, "w") as fh:
        for i, rep in enumerate(reports):
            fh.write(json.dumps({"draw": i, "initial_objective": rep.initial_objective,
                                 "final_objective": rep.final_objective, "steps": rep.steps,
                                 "stop_reason": rep.stop_reason, "train_rmse": rep.train_rmse,
                                 "validation_rmse": rep.validation_rmse,
                                 "params": rep.params.to_dict()}) + "\n")
    return {"jsonl": path}


def self_check(seed: int = 0, n_coords: int = 40) -> dict:
    """Quick self-tests: simulator fixed point, AD vs finite differences and
    attention causality."""
    report = {}
    plant = Evaporator(EvaporatorParams.consistent())
    s = PlantState(*STEADY_STATE)
    drift = 0.0
    for _ in range(100):
        nxt = plant.step(s, PlantInput(*STEADY_INPUT))
        drift = max(drift, abs(nxt.X2 - s.X2), abs(nxt.P2 - s.P2))
        s = nxt
    report["steady_state"] = {"max_step_drift": float(drift), "ok": bool(drift < 1e-3)}

    ccfg = cf.ControllerConfig.preset("desk")
    rng = stream(seed, "check")
    w = cf.init_weights(ccfg, rng)
    w = {k: v + 0.05 * rng.standard_normal(v.shape) if k.startswith(("head", "pid")) else v for k, v in w.items()}
    draw = sample_draw(seed, 0, DistributionConfig(horizon=5), scope="check")
    _, grads, _ = rss_and_grad(w, ccfg, [draw])
    names = sorted(w)
    picks = []
    for _ in range(n_coords):
        k = names[int(rng.integers(len(names)))]
        picks.append((k, tuple(int(rng.integers(n)) for n in w[k].shape)))
    worst = 0.0
    eps = 1e-6
    for k, idx in picks:
        wp = {n: np.array(v) for n, v in w.items()}
        wm = {n: np.array(v) for n, v in w.items()}
        wp[k][idx] += eps
        wm[k][idx] -= eps
        fp = rss_and_grad(wp, ccfg, [draw])[0]
        fm = rss_and_grad(wm, ccfg, [draw])[0]
        fd = (fp - fm) / (2 * eps)
        ad = float(grads[k][idx])
        worst = max(worst, abs(ad - fd) / max(abs(fd), 1e-6))
    report["gradient"] = {"coordinates": n_coords, "max_rel_error": worst, "ok": bool(worst < 1e-3)}

    T = 12
    tokens = rng.standard_normal((T, ccfg.token_dim))
    base = dc.value_of(cf.trunk(w, ccfg, tokens, all_positions=True))
    leaks = 0
    for j in range(1, T):
        pert = tokens.copy()
        pert[j] += rng.standard_normal(ccfg.token_dim)
        out = dc.value_of(cf.trunk(w, ccfg, pert, all_positions=True))
        leaks += int(np.any(out[:j] != base[:j]))
    report["causality"] = {"leaks": leaks, "ok": leaks == 0}
    report["ok"] = all(v["ok"] for v in report.values() if isinstance(v, dict))
    return report


def cmd_check(cfg, args):
    report = self_check(cfg.seed)
    if not report["ok"]:
        raise RuntimeError(f"self-check failed: {json.dumps(report)}")
    return report


COMMANDS = {"simulate": cmd_simulate, "sample-meta": cmd_sample_meta, "train": cmd_train, "eval": cmd_eval,
            "baseline": cmd_baseline, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.preset, args.seed)
    except ConfigError as exc:
        _emit_error("ConfigError", exc)
        return EXIT_USAGE
    t0 = time.perf_counter()
    try:
        result = COMMANDS[args.command](cfg, args)
    except (MissingArtifact, FileNotFoundError) as exc:
        _emit_error("MissingArtifact", exc)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - reported as JSON
        _emit_error(type(exc).__name__, exc)
        return EXIT_FAIL
    result = {"command": args.command, "seconds": round(time.perf_counter() - t0, 3), **result}
    print(json.dumps(result, default=_json_default))
    return 0


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, np.generic):
        return o.item()
    return str(o)


if __name__ == "__main__":
    sys.exit(main())
