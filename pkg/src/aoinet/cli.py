"""Command line: simulate, train, evaluate, sweep, tune."""

import argparse
from dataclasses import replace
import logging
import os
import sys

from . import _kernels
from .experiments import (
    ConfigError,
    ExperimentSpec,
    load_config,
    preset_fig,
    run_experiment,
    tune_baseline,
    write_metrics,
)
from .rl import REWARD_KINDS, train


def _spec(args, mode):
    spec = load_config(args.config) if getattr(args, "config", None) else ExperimentSpec()
    return replace(spec, mode=mode)


def cmd_simulate(args):
    spec = _spec(args, "simulate")
    spec = replace(
        spec,
        policies=[args.policy] if args.policy else spec.policies,
        episodes=args.episodes or spec.episodes,
        seed_base=spec.seed_base if args.seed is None else args.seed,
        out_dir=args.out or spec.out_dir,
        save_traces=not args.no_traces,
    )
    rows = run_experiment(spec)
    _print_rows(rows)


def cmd_evaluate(args):
    spec = _spec(args, "evaluate")
    spec = replace(
        spec,
        policies=[f"gnn({args.checkpoint})"],
        episodes=args.episodes or spec.episodes,
        seed_base=spec.seed_base if args.seed is None else args.seed,
        out_dir=args.out or spec.out_dir,
        save_traces=args.traces,
    )
    _print_rows(run_experiment(spec))


def cmd_train(args):
    spec = _spec(args, "train")
    ppo = spec.ppo if args.budget is None else replace(spec.ppo, total_observations=int(args.budget))
    seed = spec.mission.seed if args.seed is None else args.seed
    res = train(spec.mission, spec.gnn, ppo, reward_kind=args.reward, seed=seed, out_dir=args.out)
    print(f"updates {res.updates}  initial AoI {res.initial_aoi:.3f}  final AoI {res.final_aoi:.3f}")
    print(f"checkpoint {res.checkpoint}")


def cmd_sweep(args):
    if args.preset:
        spec = preset_fig(args.preset, checkpoint_dir=args.checkpoint_dir)
        if args.config:
            base = load_config(args.config)
            spec = replace(spec, mission=replace(base.mission, task=spec.mission.task), gnn=base.gnn)
    else:
        spec = _spec(args, "sweep")
    spec = replace(
        spec,
        episodes=args.episodes or spec.episodes,
        seed_base=spec.seed_base if args.seed is None else args.seed,
        out_dir=args.out or spec.out_dir,
        save_traces=args.traces,
    )
    if args.policies:
        spec = replace(spec, policies=args.policies.split(","))
    _print_rows(run_experiment(spec))


def cmd_tune(args):
    spec = _spec(args, "simulate")
    best, table = tune_baseline(args.policy, spec.mission, episodes=args.episodes, seed_base=args.seed or 0)
    rows = [
        {"sweep_value": p, "policy": f"{args.policy}({p:g})", "mean_aoi": a, "sem_aoi": 0.0, "mean_velvar": 0.0,
         "sem_velvar": 0.0, "episodes": args.episodes, "seed_base": args.seed or 0, "flags": "tuning"}
        for p, a in table
    ]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_metrics(os.path.join(args.out, f"tune_{args.policy}.csv"), rows)
    for p, a in table:
        print(f"p={p:.1f}  mean AoI {a:.3f}")
    print(f"best p = {best:.1f}")


def _print_rows(rows):
    for r in rows:
        print(f"{str(r['sweep_value']):>8}  {r['policy']:<28} AoI {r['mean_aoi']:9.3f} +- {r['sem_aoi']:.3f}"
              f"  velvar {r['mean_velvar']:.4f}  n={r['episodes']}")


def build_parser():
    ap = argparse.ArgumentParser(prog="aoinet", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run episodes of a policy and write metrics/traces")
    p.add_argument("--config")
    p.add_argument("--policy", help="flood(p) | roundrobin | mst(p) | silent | gnn(checkpoint)")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--no-traces", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a GNN policy with PPO")
    p.add_argument("--config")
    p.add_argument("--reward", choices=REWARD_KINDS, default="aoi")
    p.add_argument("--budget", type=float, help="observation budget (agent decisions)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--traces", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run a preset or configured sweep")
    p.add_argument("--preset", choices=["receptive_field", "power", "teamsize", "flocking"])
    p.add_argument("--config")
    p.add_argument("--checkpoint-dir", default="checkpoints")
    p.add_argument("--policies", help="comma-separated policy list overriding the preset")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--traces", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("tune", help="grid-search the probability of flood or mst")
    p.add_argument("policy", choices=["flood", "mst"])
    p.add_argument("--config")
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger(__name__).info("kernel backend: %s", _kernels.BACKEND)
    if args.command == "sweep" and not args.preset and not args.config:
        print("sweep needs --preset or --config", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
