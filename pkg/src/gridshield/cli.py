"""Command-line entry points: stage solvers, training, evaluation, timing,
and the full pipeline."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .adversary import ScenarioSampler, attack_to_csv, heatmap_csvs, worst_attack_horizon
from .bess import schedule_to_csv, solve_stage3
from .casedata import flat_profile, load_case, load_profile
from .dispatch import dispatch_to_csv, solve_horizon
from .harness import (
    ExperimentConfig,
    evaluate,
    eval_steps_to_csv,
    load_actor,
    run_pipeline,
    timing_report,
    timing_rows_to_csv,
)


def _load_inputs(args):
    case = load_case(args.case)
    if getattr(args, "profile", None):
        with open(args.profile) as fh:
            profile = load_profile(fh.read(), case)
    else:
        profile = flat_profile(case)
    return case, profile


def _write_out(args, name, text):
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name)
    with open(path, "w") as fh:
        fh.write(text)
    print(path)
    return path


def cmd_stage1(args):
    case, profile = _load_inputs(args)
    sol = solve_horizon(case, profile)
    _write_out(args, "stage1.csv", dispatch_to_csv(case, sol))
    print(f"J1 total: {sol.objective:.2f} $  feasible: {sol.feasible}")


def cmd_attack(args):
    case, profile = _load_inputs(args)
    sol = solve_horizon(case, profile)
    attack = worst_attack_horizon(case, sol, args.k)
    _write_out(args, "attacks.csv", attack_to_csv(case, attack))
    omega_csv, psi_csv = heatmap_csvs(case, attack)
    _write_out(args, "heatmap_omega.csv", omega_csv)
    _write_out(args, "heatmap_psi.csv", psi_csv)
    if not args.no_render:
        from . import plots
        plots.render_heatmaps(omega_csv, psi_csv,
                              os.path.join(args.out, "violation_heatmaps.png"))
        print(os.path.join(args.out, "violation_heatmaps.png"))
    print(f"J2 total: {attack.j2:.2f}")


def cmd_stage3_oracle(args):
    case, profile = _load_inputs(args)
    sol = solve_horizon(case, profile)
    attack = worst_attack_horizon(case, sol, args.k)
    sched = solve_stage3(case, sol, attack, np.full(case.n_bess, args.soc0))
    _write_out(args, "stage3_oracle.csv", schedule_to_csv(case, sched))
    print(f"J3 total: {sched.objective:.2f} $  feasible: {sched.feasible}")


def _config_from_args(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_json(fh.read())
    else:
        cfg = ExperimentConfig(case_path=args.case or "")
    if args.case:
        cfg.case_path = args.case
    if getattr(args, "profile", None):
        cfg.profile_path = args.profile
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if getattr(args, "episodes", None):
        cfg.episodes = args.episodes
    if getattr(args, "k", None) is not None:
        cfg.k = args.k
    if not cfg.case_path:
        raise SystemExit("either --case or --config with case_path is required")
    return cfg


def cmd_train(args):
    cfg = _config_from_args(args)
    cfg.eval_scenarios = 0  # stages + training + checkpoint, no gap report
    paths = run_pipeline(cfg, render=not args.no_render)
    for p in sorted(paths.values()):
        print(p)


def cmd_evaluate(args):
    case, profile = _load_inputs(args)
    actor = load_actor(args.checkpoint)
    dispatch = solve_horizon(case, profile)
    report, step_rows = evaluate(case, profile, dispatch, actor,
                                 scenarios=args.scenarios, k=args.k,
                                 seed=args.seed or 0)
    _write_out(args, "gap_report.csv", report.to_csv())
    _write_out(args, "eval_steps.csv", eval_steps_to_csv(step_rows))
    if not args.no_render:
        from . import plots
        plots.render_gap_report(report, os.path.join(args.out, "gap_report.png"))
    print(f"mean gap: {report.mean_gap:.2f}%  max: {report.max_gap:.2f}%  "
          f"violations: {report.violation_steps_total}  "
          f"latency p95: {report.latency_ms['p95']:.3f} ms")


def cmd_timing(args):
    case, profile = _load_inputs(args)
    actor = load_actor(args.checkpoint)
    dispatch = solve_horizon(case, profile)
    sampler = ScenarioSampler(case, dispatch, args.k, seed=args.seed or 0)
    rows = timing_report(case, profile, dispatch, actor, sampler.worst())
    _write_out(args, "timing_report.csv", timing_rows_to_csv(rows))
    for r in rows:
        ms = "-" if r["per_state_ms"] != r["per_state_ms"] else f"{r['per_state_ms']:.3f} ms"
        print(f"{r['method']:>14}: {ms:>12}  factor {r['factor']:.1f}x ({r['source']})")


def cmd_run(args):
    cfg = _config_from_args(args)
    paths = run_pipeline(cfg, render=not args.no_render)
    for p in sorted(paths.values()):
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="gridshield",
                                description="tri-level grid cyber-defense lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, profile=True, out_default="out"):
        sp.add_argument("--case", required=False, help="case file path")
        if profile:
            sp.add_argument("--profile", help="hourly load profile CSV")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--no-render", action="store_true",
                        help="skip figure rendering")

    sp = sub.add_parser("stage1", help="baseline dispatch over the horizon")
    common(sp)
    sp.set_defaults(func=cmd_stage1)

    sp = sub.add_parser("attack", help="worst-case attack per hour")
    common(sp)
    sp.add_argument("--k", type=float, default=1.0, help="attack budget")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("stage3-oracle", help="exact defense schedule")
    common(sp)
    sp.add_argument("--k", type=float, default=1.0)
    sp.add_argument("--soc0", type=float, default=0.9)
    sp.set_defaults(func=cmd_stage3_oracle)

    sp = sub.add_parser("train", help="train the constrained policy")
    common(sp, out_default=None)
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--k", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="held-out gap report for a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scenarios", type=int, default=100)
    sp.add_argument("--k", type=float, default=1.0)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("timing", help="policy vs oracle wall-clock factors")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--k", type=float, default=1.0)
    sp.set_defaults(func=cmd_timing)

    sp = sub.add_parser("run", help="full pipeline: stages, training, eval")
    common(sp, out_default=None)
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--k", type=float)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main(sys.argv[1:])
