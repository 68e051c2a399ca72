"""Command line entry point.

Exit codes: 0 success, 1 runtime failure, 2 bad input.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from .harness import (
    ExperimentConfig,
    InputError,
    config_from_file,
    run_distill,
    run_eval,
    run_gradcheck,
    run_train,
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctedd", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="stage-1 centralized training run")
    t.add_argument("--config", required=True, help="flat key = value config file")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--sigma-fixed", type=float, default=None, choices=[0.4, 0.6, 0.8],
                   help="freeze the action-sampling spread (ablation)")
    t.add_argument("--env", default=None, dest="env_id")
    t.add_argument("--algorithm", default=None, choices=["ctedd", "maddpg"])
    t.add_argument("--steps", type=int, default=None, dest="total_env_steps")
    t.add_argument("--out", default=None, dest="out_dir")

    d = sub.add_parser("distill", help="stage-2 policy distillation from saved artifacts")
    d.add_argument("--buffer", required=True)
    d.add_argument("--teacher", required=True)
    d.add_argument("--msg-dim", type=int, required=True, choices=[1, 3])
    d.add_argument("--out", default="runs/distill")
    d.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a saved policy")
    e.add_argument("--policy", required=True)
    e.add_argument("--env", required=True)
    e.add_argument("--episodes", type=int, default=400)
    e.add_argument("--seed", type=int, default=0)

    pl = sub.add_parser("plot", help="render learning curves to SVG")
    pl.add_argument("metrics", nargs="+")
    pl.add_argument("-o", "--out", required=True)

    sub.add_parser("gradcheck", help="finite-difference gate over all network families")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "train":
            overrides = {
                "seed": args.seed,
                "sigma_fixed": args.sigma_fixed,
                "env_id": args.env_id,
                "algorithm": args.algorithm,
                "total_env_steps": args.total_env_steps,
                "out_dir": args.out_dir,
            }
            paths = run_train(config_from_file(args.config, overrides))
            for key, path in paths.items():
                print(f"{key}: {path}")
        elif args.cmd == "distill":
            cfg = ExperimentConfig(message_dim=args.msg_dim, seed=args.seed, out_dir=args.out)
            paths = run_distill(cfg, args.buffer, args.teacher)
            for key, path in paths.items():
                print(f"{key}: {path}")
        elif args.cmd == "eval":
            variant, mean, ci = run_eval(args.policy, args.env, args.episodes, args.seed)
            print(f"variant={variant} episodes={args.episodes} mean_return={mean:.6g} ci95={ci:.6g}")
        elif args.cmd == "plot":
            from .plotting import plot_curves

            plot_curves(args.metrics, args.out)
            print(f"wrote {args.out}")
        elif args.cmd == "gradcheck":
            results = run_gradcheck()
            failed = [r for r in results if not r.passed]
            for r in results:
                status = "ok" if r.passed else "FAIL"
                print(f"{status:4s} {r.name:32s} params={r.n_params:6d} max_rel_err={r.max_rel_err:.3e}")
            if failed:
                print(f"{len(failed)} gradient check(s) failed", file=sys.stderr)
                return 1
        return 0
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
