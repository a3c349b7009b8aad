"""Command line entry point: ``soil {gen-demos,train,eval,mismatch,export-plots}``.

Flags given on the command line override the matching config-file fields.
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from soil import algos, approx, demos as demos_mod, npg
from soil.bench import experiments as ex
from soil.bench.config import ConfigError, ExperimentConfig, load_config
from soil.envs import EnvSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N[,N...], got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=_seed_list, help="seed or comma-separated seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--env", choices=("point_relocate", "arm_relocate"), help="env kind (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soil", description="State-only imitation learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-demos", help="write scripted-expert demonstrations")
    _common(p)
    p.add_argument("--n", type=int, help="number of demonstrations (default 25)")
    p.add_argument("--demos", help="output file (default <out>/demos.jsonl)")
    p.add_argument("--state-only", action="store_true", help="strip actions before writing")

    p = sub.add_parser("train", help="train one algorithm over the seed list")
    _common(p)
    p.add_argument("--algo", choices=algos.ALGORITHMS)
    p.add_argument("--demos", help="demonstration file")
    p.add_argument("--iters", type=int, help="outer iterations")

    p = sub.add_parser("eval", help="evaluate a policy checkpoint with mean actions")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, help="evaluation episodes (default from config)")

    p = sub.add_parser("mismatch", help="SOIL vs DAPG on dynamics/morphology/object variants")
    _common(p)
    p.add_argument("--demos", help="demonstrations from the unmodified env")
    p.add_argument("--iters", type=int)
    p.add_argument("--variants", default=",".join(ex.DEFAULT_MISMATCH),
                   help=f"comma-separated subset of {','.join(ex.MISMATCH_PRESETS)} (empty for none)")

    p = sub.add_parser("export-plots", help="aggregate metrics CSVs into per-metric mean/std tables")
    p.add_argument("run_dir", nargs="?", help="directory holding <label>/seed<N>/metrics.csv")
    p.add_argument("--out", help="destination directory (default <run_dir>/plots)")
    return parser


def _experiment(args) -> ExperimentConfig:
    exp = load_config(args.config) if args.config else ExperimentConfig()
    changes = {"seeds": args.seed, "out": args.out}
    if getattr(args, "demos", None) is not None and args.command != "gen-demos":
        changes["demos"] = args.demos
    if getattr(args, "algo", None):
        changes["algo.algorithm"] = args.algo
    if getattr(args, "iters", None) is not None:
        changes["algo.n_iter"] = args.iters
    if getattr(args, "n", None) is not None:
        changes["n_demos"] = args.n
    if getattr(args, "episodes", None) is not None:
        changes["eval_episodes"] = args.episodes
    if args.env and args.env != exp.env.kind:
        exp = replace(exp, env=EnvSpec(kind=args.env, horizon=exp.env.horizon, dt=exp.env.dt))
    return exp.with_overrides(**changes)


def cmd_gen_demos(args) -> int:
    exp = _experiment(args)
    seed = exp.seeds[0] if args.seed else exp.demo_seed
    stats: dict = {}
    demo_set = demos_mod.generate_demos(exp.env, exp.n_demos, seed, stats)
    path = Path(args.demos) if args.demos else Path(exp.out) / "demos.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    returns = [float(t.rewards.sum()) for t in demo_set.trajectories]
    if args.state_only:
        demo_set = demos_mod.strip_actions(demo_set)
    demos_mod.save(demo_set, path)
    print(f"wrote {len(demo_set)} demonstrations to {path}")
    print(f"expert success rate {stats['successes'] / stats['attempts']:.3f} "
          f"({stats['successes']}/{stats['attempts']} episodes), mean return {np.mean(returns):.2f}")
    return EXIT_OK


def cmd_train(args) -> int:
    exp = _experiment(args)
    algo = exp.algo.algorithm
    raw = ex.load_demos(exp.demos) if exp.demos and algo != "npg" else None
    if algo == "npg" and exp.demos:
        ex.warn("npg ignores --demos")
    demo_set = ex.prepare_demos(algo, exp.env, raw, exp.demos or "demo set")
    records = ex.run_seeds(exp, demo_set)
    for rec in records:
        print(f"{rec.label} seed {rec.seed}: final return {rec.final_return:.2f}, "
              f"success {rec.final_success:.3f}, eval return {rec.eval['return_mean']:.2f}, "
              f"eval success {rec.eval['success_rate']:.3f} ({rec.wall_time_s:.1f} s)")
    print(f"runs written under {Path(exp.out) / algo}")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _experiment(args)
    try:
        policy, meta = approx.load_policy(args.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    env = exp.env
    if not args.config and not args.env and "env" in meta:
        env = EnvSpec.from_dict(meta["env"])
    seed = exp.seeds[0] if args.seed else exp.eval_seed
    if policy.obs_dim != env.obs_dim or policy.act_dim != env.act_dim:
        raise ConfigError(f"checkpoint policy has dims ({policy.obs_dim}, {policy.act_dim}), "
                          f"env {env.kind} needs ({env.obs_dim}, {env.act_dim})")
    summary = algos.evaluate(env, policy, exp.eval_episodes, seed)
    print(f"episodes {summary['episodes']}  return {summary['return_mean']:.4f} +- {summary['return_std']:.4f}  "
          f"success {summary['success_rate']:.4f}")
    return EXIT_OK


def cmd_mismatch(args) -> int:
    exp = _experiment(args)
    variants = [v for v in args.variants.split(",") if v.strip()]
    for v in variants:
        ex.preset_envs(v, exp.env)
    base_demos = ex.load_demos(exp.demos) if exp.demos else None
    if base_demos is not None and base_demos.state_only:
        raise ConfigError(f"{exp.demos} has state_only=true; the mismatch suite also trains dapg and "
                          "needs demonstration actions")
    rows = ex.mismatch_suite(exp, variants, out=str(Path(exp.out) / "mismatch"), demos=base_demos)
    table = Path(exp.out) / "mismatch.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    table.write_text(ex.table_csv(rows))
    print(ex.table_csv(rows), end="")
    print(f"table written to {table}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    run_dir = args.run_dir or "runs"
    try:
        written = ex.export_plots(run_dir, args.out)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in written:
        print(path)
    return EXIT_OK


COMMANDS = {
    "gen-demos": cmd_gen_demos,
    "train": cmd_train,
    "eval": cmd_eval,
    "mismatch": cmd_mismatch,
    "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (demos_mod.ExpertFailure, npg.NumericalError, OSError, RuntimeError, ArithmeticError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
