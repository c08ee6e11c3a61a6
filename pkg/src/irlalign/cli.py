"""Command-line driver: ``irlalign <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .baselines import implicit_reward
from .evalx import heldout_preferences
from .workbench import (
    ExperimentConfig,
    ExperimentContext,
    InstanceSpec,
    RunMetrics,
    SchemaError,
    default_config_dict,
    load_instance,
    make_instance,
    policy_from_dict,
    policy_to_dict,
    read_dataset,
    reward_from_dict,
    reward_to_dict,
    run_experiment,
    sample_demonstrations,
    save_instance,
    write_dataset,
)

log = logging.getLogger("irlalign")

EVAL_COLUMNS = ["reward_accuracy", "gt_score", "win_rate_vs_ref", "kl_to_expert", "exact_likelihood",
                "heldout_demo_loglik"]


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _write_json(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)
        f.write("\n")


def _load_config(path, seed):
    cfg = ExperimentConfig.from_dict(_read_json(path)) if path else ExperimentConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def cmd_gen(args):
    spec = InstanceSpec.from_dict(_read_json(args.spec)) if args.spec else InstanceSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    inst = make_instance(spec)
    out = Path(args.out)
    save_instance(inst, spec, out)
    if args.n_demos:
        write_dataset(out / "demos.jsonl", sample_demonstrations(inst, args.n_demos, spec.seed + 1))
    if args.n_prefs:
        write_dataset(out / "prefs.jsonl", heldout_preferences(inst, args.n_prefs, spec.seed + 2))
    print(f"instance written to {out} (V={spec.V}, H={spec.H}, {spec.prompt_count} prompts, C_p={inst.C_p:.4f})")
    return 0


def cmd_train(args):
    method = args.command
    inst, _ = load_instance(args.instance)
    cfg = _load_config(args.config, args.seed)
    cfg = replace(cfg, methods=(method,))
    demos = read_dataset(args.demos, "demos", inst.V, inst.H)
    ctx = ExperimentContext(cfg, instance=inst, demos=demos)
    result, rows = getattr(ctx, f"run_{method}")()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if method == "irl":
        reward, policy = result
        _write_json(reward_to_dict(reward), out / "reward.json")
    else:
        policy = result
    _write_json(policy_to_dict(policy), out / "policy.json")
    metrics = RunMetrics()
    for r in rows:
        metrics.add(**r)
    (out / "metrics.csv").write_text(metrics.to_csv())
    last = rows[-1]
    print(f"{method}: heldout loglik {last['heldout_demo_loglik']:.4f}, reward acc {last['reward_accuracy']:.3f}, "
          f"KL to expert {last['kl_to_expert']:.4f}")
    return 0


def cmd_eval(args):
    inst, _ = load_instance(args.instance)
    cfg = _load_config(args.config, args.seed)
    policy = policy_from_dict(_read_json(args.policy))
    if args.reward:
        scorer = reward_from_dict(_read_json(args.reward))
    else:
        scorer = implicit_reward(policy, inst.pi_ref, inst.beta)
    ctx = ExperimentContext(cfg, instance=inst)
    row = ctx.row("eval", 0, policy, scorer, 0.0, 0.0)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        w.writerow([f"{row[k]:.17g}" for k in EVAL_COLUMNS])
    for k in EVAL_COLUMNS:
        print(f"{k:20s} {row[k]:.6f}")
    return 0


def cmd_verify(args):
    from .verify import CHECKS

    result = CHECKS[args.check](seed=0 if args.seed is None else args.seed)
    for k, v in result.items():
        if k == "rows":
            for row in v:
                print(f"  size {row['size']:5d}: median {row['median_gap']:.4g}  p90 {row['p90_gap']:.4g}  "
                      f"bound {row['bound']:.4g}")
        else:
            print(f"{k}: {v}")
    return 0 if result["passed"] else 1


def cmd_run(args):
    config_path = args.config
    if args.seed is not None:
        cfg = _load_config(args.config, args.seed)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        config_path = Path(args.out) / "config.json"
        _write_json(cfg.to_dict(), config_path)
    elif config_path is None:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        config_path = Path(args.out) / "config.json"
        _write_json(default_config_dict(), config_path)
    metrics, code = run_experiment(config_path, args.out, threads=args.threads)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return code


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")

    p = argparse.ArgumentParser(prog="irlalign", parents=[common],
                                description="Reward learning from demonstrations on enumerable sequence models.")
    p.add_argument("--dump-defaults", action="store_true", help="print the default run config as JSON and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic instance")
    g.add_argument("--spec", help="instance spec JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--n-demos", type=int, default=200, help="also write demos.jsonl (0 to skip)")
    g.add_argument("--n-prefs", type=int, default=0, help="also write judge-labelled prefs.jsonl")
    g.set_defaults(func=cmd_gen)

    for name in ("sft", "spin", "irl"):
        t = sub.add_parser(name, parents=[common], help=f"train with {name}")
        t.add_argument("--instance", required=True)
        t.add_argument("--demos", required=True)
        t.add_argument("--config", help="run config JSON (see --dump-defaults)")
        t.add_argument("--out", required=True)
        t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="score a policy (and reward) against the judge")
    e.add_argument("--instance", required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--reward", help="reward JSON; defaults to the policy's implicit reward")
    e.add_argument("--config")
    e.add_argument("--out", required=True, help="CSV path")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run a built-in self-check")
    v.add_argument("check", choices=["gradient", "concentration", "identities"])
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("run", parents=[common], help="run every configured method end to end")
    r.add_argument("--config")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.dump_defaults:
        json.dump(default_config_dict(), sys.stdout, indent=1)
        print()
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (SchemaError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"irlalign: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
