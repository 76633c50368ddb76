"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 integrity failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import ConfigError, ExperimentConfig, load_config, load_preset
from .diffusion import sample_policy
from .evaluation import write_slice
from .io import IntegrityError, file_digest, read_buffers, read_networks, write_buffers, write_networks
from .netgen import build_gso
from .seeding import derive_seed
from .trainer import load_checkpoint, save_checkpoint, write_trace

log = logging.getLogger("gdmpolicy")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INTEGRITY = 0, 2, 3, 4


def resolve_config(spec: str | None, seed: int | None = None) -> ExperimentConfig:
    """A JSON path, a preset name, or None for the built-in defaults."""
    if spec is None:
        cfg = ExperimentConfig()
    elif Path(spec).is_file():
        cfg = load_config(spec)
    elif spec.endswith(".json"):
        raise ConfigError(f"config file {spec} does not exist")
    else:
        try:
            cfg = load_preset(spec)
        except FileNotFoundError as exc:
            raise ConfigError(f"no config file or preset named {spec!r}") from exc
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _load_data(args):
    net_cfg, states, labels = read_networks(_need(args.data, "network file"))
    buffers, f_min = read_buffers(_need(args.buffers, "buffer file"))
    return dataclasses.replace(net_cfg, f_min=f_min), states, labels, buffers


def _check_pairing(args, buffers_path) -> None:
    from .io import read_artifact

    stored = read_artifact(buffers_path, "gdmpolicy.buffers").get("networks_digest", "")
    if stored and stored != file_digest(args.data):
        raise IntegrityError(f"{buffers_path} was generated from a different network file")


# subcommands ----------------------------------------------------------------

def cmd_netgen(args, cfg: ExperimentConfig) -> None:
    states, labels = pl.make_networks(cfg, cfg.seed, args.count)
    write_networks(args.out, cfg.network, states, labels)
    print(f"wrote {len(states)} networks to {args.out}")


def cmd_expert(args, cfg: ExperimentConfig) -> None:
    net_cfg, states, labels = read_networks(_need(args.data, "network file"))
    cfg = dataclasses.replace(cfg, network=net_cfg)
    f_min = pl.resolve_f_min(cfg, states, labels, cfg.seed)
    net = dataclasses.replace(net_cfg, f_min=f_min)
    buffers = pl.make_buffers(cfg, states, net, cfg.seed, args.jobs)
    write_buffers(args.out, buffers, f_min, file_digest(args.data))
    feasible = sum(b.feasible for b in buffers)
    print(f"f_min {f_min:.4f}; {feasible}/{len(buffers)} networks feasible; wrote {args.out}")


def cmd_train(args, cfg: ExperimentConfig) -> None:
    _check_pairing(args, args.buffers)
    net, states, labels, buffers = _load_data(args)
    result = pl.fit(cfg, states, labels, buffers, net, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, out / pl.CHECKPOINT)
    write_trace(result.trace, out / pl.TRACE)
    print(f"best epoch {result.best.epoch} metric {result.best.metric}; wrote {out}")


def cmd_eval(args, cfg: ExperimentConfig) -> None:
    _check_pairing(args, args.buffers)
    net, states, labels, buffers = _load_data(args)
    ckpt = load_checkpoint(_need(args.ckpt, "checkpoint"))
    horizons = [int(h) for h in args.horizons.split(",")] if args.horizons else None
    rows = pl.evaluate(cfg, ckpt, states, labels, buffers, net, cfg.seed, args.out,
                       T=args.T, horizons=horizons, split=args.split, jobs=args.jobs)
    for r in rows:
        print(f"{r['source']:>14} tau={r['horizon']:<4d} mean {r['mean_rate']:.4f} "
              f"p5 {r['p5_rate']:.4f} sat {r['satisfaction']:.3f}")


def _parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in text.split(","):
        i, j = item.split(":")
        pairs.append((int(i), int(j)))
    return pairs


def cmd_slice(args, cfg: ExperimentConfig) -> None:
    net, states, labels, buffers = _load_data(args)
    ckpt = load_checkpoint(_need(args.ckpt, "checkpoint"))
    i = args.network
    if not 0 <= i < len(states):
        raise ConfigError(f"network index {i} out of range")
    state = states[i]
    pairs = _parse_pairs(args.pairs) if args.pairs else [(0, 1)]
    if any(not (0 <= a < state.n and 0 <= b < state.n) for a, b in pairs):
        raise ConfigError("pair index out of range")
    rng = np.random.default_rng(derive_seed(cfg.seed, "slice", i))
    gdm = sample_policy(build_gso(state, net), ckpt.params, ckpt.schedule(), rng, net.p_max,
                        n_samples=args.samples, clip_x0=ckpt.schedule_cfg.clip_x0)
    expert = buffers[i].draw(rng, args.samples)
    write_slice(args.out, pairs, {"expert": expert, "gdm": gdm}, net.p_max)
    print(f"wrote {args.out}")


def cmd_pipeline(args, cfg: ExperimentConfig) -> None:
    run = pl.run_pipeline(cfg, args.out, args.jobs)
    ran = ", ".join(run.executed) or "none (all stages up to date)"
    print(f"stages run: {ran}")
    summary = Path(args.out) / pl.EVAL_DIR / "summary.json"
    if summary.exists():
        for r in json.loads(summary.read_text())["comparison"]:
            print(f"{r['source']:>14} tau={r['horizon']:<4d} mean {r['mean_rate']:.4f} "
                  f"p5 {r['p5_rate']:.4f} sat {r['satisfaction']:.3f}")


# argument parsing -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or preset name (desk, paper)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-network work")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gdmpolicy", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("netgen", parents=[common], help="generate interference networks")
    p.add_argument("--count", type=int, help="number of networks (default: split total)")
    p.set_defaults(fn=cmd_netgen)

    p = sub.add_parser("expert", parents=[common], help="run the dual-descent expert")
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_expert)

    p = sub.add_parser("train", parents=[common], help="train the diffusion policy")
    p.add_argument("--data", required=True)
    p.add_argument("--buffers", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="compare policies by sequential rollouts")
    p.add_argument("--data", required=True)
    p.add_argument("--buffers", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--T", type=int)
    p.add_argument("--horizons", help="comma-separated, e.g. 20,200")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("slice", parents=[common], help="dump 2D scatter data of policy samples")
    p.add_argument("--data", required=True)
    p.add_argument("--buffers", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--network", type=int, default=0)
    p.add_argument("--pairs", help="node pairs, e.g. 0:1,2:3")
    p.add_argument("--samples", type=int, default=500)
    p.set_defaults(fn=cmd_slice)

    p = sub.add_parser("pipeline", parents=[common], help="netgen, expert, train and eval")
    p.set_defaults(fn=cmd_pipeline)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, IntegrityError):
        return EXIT_INTEGRITY
    return EXIT_NUMERICAL


def _error_record(args, code: int, exc: BaseException) -> None:
    # the pipeline writes the failing stage; add the exit code
    if getattr(args, "command", None) != "pipeline":
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "error.json"
    record = json.loads(path.read_text()) if path.exists() else {
        "stage": None, "error": type(exc).__name__, "message": str(exc)}
    record["exit_code"] = code
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = resolve_config(args.config, args.seed)
        if args.command == "pipeline":
            stale = Path(args.out) / "error.json"
            if stale.exists():
                stale.unlink()
        args.fn(args, cfg)
    except (ConfigError, IntegrityError, FloatingPointError) as exc:
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        _error_record(args, code, exc)
        return code
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
