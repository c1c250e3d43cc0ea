"""Command-line entry points: train, resume, evaluate, analyze."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import MacopConfig
from .envs import ENV_NAMES, make_env
from .metrics import (AlphaMatrix, build_eval_set, continual_metrics,
                      crossplay_matrix, evaluate_overall, offdiag_ratio,
                      wilcoxon_rank_sum, write_matrix_csv)
from .orchestrator import (BASELINE_KINDS, macop_train, make_run_env, resume,
                           run_baseline)
from .theory import verify_theory

ALGOS = ("macop",) + BASELINE_KINDS


def _load_cfg(args) -> MacopConfig:
    if args.config:
        cfg = MacopConfig.load(args.config)
        overrides = {}
        if args.env:
            overrides["env"] = args.env
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            cfg = replace(cfg, **overrides)
    else:
        if not args.env:
            raise ValueError("need --env when no --config file is given")
        cfg = MacopConfig.make(args.env, seed=args.seed or 0)
    return cfg


def _run_dir_cfg(run_dir: str) -> MacopConfig:
    path = os.path.join(run_dir, "config.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no config.json under {run_dir!r}")
    return MacopConfig.load(path)


def _run_dir_ego_mode(run_dir: str) -> str:
    path = os.path.join(run_dir, "state.json")
    if not os.path.exists(path):
        return "multi_head"
    with open(path) as f:
        return json.load(f).get("ego_mode", "multi_head")


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.algo == "macop":
        art = macop_train(cfg, out_dir=args.out)
    else:
        art = run_baseline(args.algo, cfg, out_dir=args.out)
    print(f"trained {args.algo} on {cfg.env}: {art.iterations} iterations, "
          f"{art.ego.n_heads} heads, archive size {len(art.archive)}")
    return 0


def cmd_resume(args) -> int:
    art = resume(args.dir)
    print(f"resumed run in {args.dir}: {art.iterations} iterations, "
          f"{art.ego.n_heads} heads")
    return 0


def cmd_evaluate(args) -> int:
    from .ego import load_ego
    cfg = _run_dir_cfg(args.ego)
    ego = load_ego(os.path.join(args.ego, "ego", "ego.json"))
    if ego.n_heads == 0:
        raise ValueError("ego checkpoint has no retained heads")
    mode = _run_dir_ego_mode(args.ego)
    eval_set = build_eval_set(args.evalset)
    env = make_run_env(cfg)
    rng = np.random.default_rng(cfg.seed)
    rows, grand = evaluate_overall(ego, eval_set, env, cfg, rng,
                                   episodes_per_pair=args.episodes,
                                   ego_mode=mode)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["entry", "mean", "std"])
        for label, mean, std in rows:
            w.writerow([label, mean, std])
        w.writerow(["overall", grand, ""])
    print(f"evaluated {len(rows)} pairings, grand mean {grand:.4f} "
          f"-> {args.out}")
    return 0


def _load_alpha(run_dir: str) -> AlphaMatrix:
    path = os.path.join(run_dir, "alpha.json")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"no alpha.json under {run_dir!r}; rerun with record_alpha")
    with open(path) as f:
        obj = json.load(f)
    return AlphaMatrix(obj["alpha"], obj.get("alpha_tilde") or [])


def cmd_analyze(args) -> int:
    if args.what in ("bwt", "fwt"):
        bwt, fwt = continual_metrics(_load_alpha(args.dir))
        if args.what == "bwt":
            print(f"BWT {bwt:.6f}")
        else:
            if fwt is None:
                raise ValueError(
                    "no from-scratch references recorded; rerun with "
                    "record_alpha_tilde")
            print(f"FWT {fwt:.6f}")
    elif args.what == "crossplay":
        cfg = _run_dir_cfg(args.evalset[0])
        eval_set = build_eval_set(args.evalset)
        env = make_run_env(cfg)
        rng = np.random.default_rng(cfg.seed)
        values, _ = crossplay_matrix([e.group for e in eval_set], env, cfg,
                                     rng, n_eval=args.episodes)
        labels = [e.label for e in eval_set]
        if args.out:
            write_matrix_csv(args.out, labels, values)
        print(f"crossplay matrix {values.shape[0]}x{values.shape[1]}, "
              f"off-diagonal/diagonal ratio {offdiag_ratio(values):.4f}")
    elif args.what == "theory":
        rng = np.random.default_rng(args.seed)
        report = verify_theory(rng, n_pairs=args.pairs,
                               n_dist_pairs=args.dist_pairs)
        text = report.render()
        if args.out:
            with open(args.out, "w") as f:
                f.write(text + "\n")
        print(text)
    elif args.what == "rank-sum":
        z, p, verdict = wilcoxon_rank_sum(args.a, args.b)
        print(f"z {z:.4f}  p {p:.6f}  verdict {verdict}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coordlab",
        description="Continual teammate-population training laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    p.add_argument("--algo", choices=ALGOS, default="macop")
    p.add_argument("--env", choices=ENV_NAMES)
    p.add_argument("--config", help="JSON config file (unknown keys rejected)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="run directory for logs and checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("evaluate",
                       help="score an ego checkpoint against archived teammates")
    p.add_argument("--ego", required=True, help="run directory of the ego")
    p.add_argument("--evalset", required=True, nargs="+",
                   help="run directories whose archives form the eval set")
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="post-hoc metrics and reports")
    asub = p.add_subparsers(dest="what", required=True)
    for what in ("bwt", "fwt"):
        q = asub.add_parser(what)
        q.add_argument("--dir", required=True, help="run directory")
        q.set_defaults(func=cmd_analyze, what=what)
    q = asub.add_parser("crossplay")
    q.add_argument("--evalset", required=True, nargs="+")
    q.add_argument("--episodes", type=int, default=32)
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze, what="crossplay")
    q = asub.add_parser("theory")
    q.add_argument("--pairs", type=int, default=1000)
    q.add_argument("--dist-pairs", type=int, default=10_000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze, what="theory")
    q = asub.add_parser("rank-sum")
    q.add_argument("--a", required=True, nargs="+", type=float)
    q.add_argument("--b", required=True, nargs="+", type=float)
    q.set_defaults(func=cmd_analyze, what="rank-sum")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, NotADirectoryError,
            ZeroDivisionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
