"""Command-line entry point.

Subcommands: simulate, train, verify, equilibrium, compare. One JSON config
file drives everything; --seed and --output override the config in place.
Exit codes: 0 ok, 2 config error, 3 training error, 4 property failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingError
from .experiment import (
    ExperimentConfig,
    config_hash,
    default_base_policy,
    default_config,
    load_agents,
    run_equilibrium,
    run_experiment,
    simulate_baseline,
    verify_properties,
)
from .irpo import run_irpo

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_PROPERTY = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genauction",
        description="Generative ad auction simulator: training, comparison, and property suites.",
    )
    parser.add_argument("--config", type=Path, help="JSON experiment config (defaults used if omitted)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--output", type=Path, help="override the config output_dir")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="deploy the base prior and log simulated clicks")
    sub.add_parser("train", help="run the iterative training loop, write history and models")
    p_verify = sub.add_parser("verify", help="run mechanism property suites")
    p_verify.add_argument(
        "--inject-step-control",
        action="store_true",
        help="run the continuity check against the discrete slot-auction control (must fail)",
    )
    p_eq = sub.add_parser("equilibrium", help="best-response dynamics for an agents file")
    p_eq.add_argument("--agents", type=Path, required=True, help="JSON list of {kind, value, roi}")
    p_eq.add_argument("--max-iters", type=int, default=50)
    sub.add_parser("compare", help="train and compare the four mechanisms on held-out queries")
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.from_json_file(args.config) if args.config else default_config()
    d = config.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.output is not None:
        d["output_dir"] = str(args.output)
    if d.get("output_dir") is None:
        d["output_dir"] = "out"
    return ExperimentConfig.from_dict(d)


def _cmd_simulate(config: ExperimentConfig) -> int:
    summary = simulate_baseline(config)
    print(json.dumps(summary, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_train(config: ExperimentConfig) -> int:
    base = default_base_policy(config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[0])
    params, pctr, history = run_irpo(config.scenario, config.irpo, config.mechanism, rng, base=base)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "history.csv").write_text(history.to_csv_text())
    (out / "pctr.json").write_text(pctr.to_json() + "\n")
    policy_obj = {
        "theta": [float(x) for x in params.theta],
        "ref_theta": [float(x) for x in params.ref_theta],
        "seed": config.seed,
        "config_hash": config_hash(config),
    }
    (out / "policy.json").write_text(json.dumps(policy_obj, sort_keys=True, indent=2) + "\n")
    last = history[-1]
    print(
        f"trained {len(history)} epochs: bce={last.bce:.4f} "
        f"oracle_reward={last.oracle_reward_per_query:.2f} "
        f"revenue={last.revenue_per_query:.2f} gap={last.unbiasedness_gap:.4f}"
    )
    return EXIT_OK


def _cmd_verify(config: ExperimentConfig, inject: bool) -> int:
    summary = verify_properties(config, inject_step_control=inject)
    checks = [
        ("monotonicity", summary.monotonicity_passed),
        ("continuity", summary.continuity_passed),
        ("negative_control", summary.negative_control_detected),
        ("optimality", summary.optimality_passed),
        ("vm_incentive_compatibility", summary.vm_ic_passed),
    ]
    for name, ok in checks:
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    if summary.spearman_by_epoch:
        rhos = ", ".join(f"{r:.3f}" for r in summary.spearman_by_epoch)
        print(f"bid-click spearman by epoch: {rhos}")
    return EXIT_OK if summary.passed else EXIT_PROPERTY


def _cmd_equilibrium(config: ExperimentConfig, agents_path: Path, max_iters: int) -> int:
    agents = load_agents(agents_path)
    result = run_equilibrium(config, agents, max_iters=max_iters)
    bids = ", ".join(f"{b:g}" for b in result.bids)
    print(
        f"final bids: [{bids}]  epsilon={result.epsilon:.6g} "
        f"converged={result.converged} iterations={result.iterations}"
    )
    return EXIT_OK


def _cmd_compare(config: ExperimentConfig) -> int:
    report = run_experiment(config)
    print(f"{'mechanism':<12}{'revenue/query':>15}{'reward/query':>15}{'clicks':>9}{'n_ads':>8}")
    for name, row in report.mechanisms.items():
        print(
            f"{name:<12}{row.revenue_per_query:>15.2f}{row.reward_per_query:>15.2f}"
            f"{row.clicks_per_query:>9.3f}{row.mean_n_ads:>8.3f}"
        )
    diag = report.diagnostics
    print(
        f"kl contraction: {diag['kl_contraction']:.4f} "
        f"(trained {diag['kl_trained_to_optimal']:.3f} vs base {diag['kl_base_to_optimal']:.3f})"
    )
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "simulate":
            return _cmd_simulate(config)
        if args.command == "train":
            return _cmd_train(config)
        if args.command == "verify":
            return _cmd_verify(config, args.inject_step_control)
        if args.command == "equilibrium":
            return _cmd_equilibrium(config, args.agents, args.max_iters)
        if args.command == "compare":
            return _cmd_compare(config)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
