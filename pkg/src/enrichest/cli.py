"""Command-line front end.

Three subcommands::

    enrich-est estimate --config cfg.json --data trial.json [--targets F,1,2]
    enrich-est simulate --config cfg.json --reps 100000 --seed 42 --out results.csv
    enrich-est verify   --level fast|full [--seed S]

Exit codes: 0 success, 1 config/data problem, 2 futility stop, 3 a requested
target is not estimable, 4 I/O failure, 5 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from typing import Optional, Sequence

from .config import load_config, load_trial_data, parse_targets
from .errors import (
    ConfigError,
    EnrichestError,
    NoEstimateAfterStop,
    TargetError,
)
from .estimators import EstimateReport, estimate_target, pice_sigma_hat
from .oracle import run_verification
from .population import IndexSet
from .rules import apply_rule
from .simulation import RngPolicy, bias_mse_table, results_to_csv, run_scenario

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FUTILITY = 2
EXIT_TARGET = 3
EXIT_IO = 4
EXIT_VERIFY = 5


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2) on bad flags, which collides with the
    # futility exit code; route usage problems to the config exit instead
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="enrich-est", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate treatment effects from trial data")
    est.add_argument("--config", required=True)
    est.add_argument("--data", required=True)
    est.add_argument("--targets", help="comma list, e.g. F,1,2 or 1+2")
    est.add_argument("--out", help="also write the report as CSV")
    est.add_argument(
        "--unconditional",
        action="store_true",
        help="ignore the selection event (correction vanishes)",
    )
    est.add_argument(
        "--pice-df",
        choices=["selected-cells", "paper-literal"],
        default="selected-cells",
        help="degrees of freedom for the plug-in variance",
    )

    sim = sub.add_parser("simulate", help="run the scenario study")
    sim.add_argument("--config", required=True)
    sim.add_argument("--reps", type=int, default=100_000)
    sim.add_argument("--seed", type=int, default=20260810)
    sim.add_argument("--out", help="CSV output path")
    sim.add_argument("--markdown", help="also write the markdown table here")
    sim.add_argument("--threads", type=int, default=1, help="worker processes")
    sim.add_argument(
        "--mode", choices=["per-patient", "summary-fast"], default="per-patient"
    )
    sim.add_argument(
        "--pice-df",
        choices=["selected-cells", "paper-literal"],
        default="selected-cells",
    )

    ver = sub.add_parser("verify", help="run the numerical verification suite")
    ver.add_argument("--level", choices=["fast", "full"], default="fast")
    ver.add_argument("--seed", type=int, default=20260810)
    ver.add_argument("--json", help="write the machine-readable report here")
    ver.add_argument("--threads", type=int, default=1)
    return parser


def _fmt(x: Optional[float]) -> str:
    if x is None:
        return "-"
    if math.isinf(x):
        return "+inf" if x > 0 else "-inf"
    return f"{x:.6g}"


def _cmd_estimate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    spec, design = cfg.population, cfg.design
    data = load_trial_data(args.data, spec.k)

    s1 = data.stage1_summary()
    outcome = apply_rule(design.rule, spec, s1)

    if outcome.stopped:
        if not data.selected_set().is_empty:
            raise ConfigError(
                "data contain stage-2 patients but the rule stops at the interim; "
                "config and data disagree"
            )
        print("futility stop at the interim analysis; no estimates are defined")
        return EXIT_FUTILITY
    if data.selected_set() != outcome.selected:
        raise ConfigError(
            f"rule selects {outcome.selected.members} but stage-2 data cover "
            f"{data.selected_set().members}; config and data disagree"
        )

    if args.targets:
        targets = parse_targets(args.targets, spec.k)
    else:
        targets = [outcome.selected] + [
            IndexSet.of(m) for m in outcome.selected if len(outcome.selected) > 1
        ]

    sigma_hat2 = None
    if not design.sigma_known:
        sigma_hat2 = pice_sigma_hat(data, outcome.selected, spec.k, df_mode=args.pice_df)

    reports: list[tuple[IndexSet, Optional[EstimateReport], Optional[str]]] = []
    any_target_error = False
    for target in targets:
        try:
            rep = estimate_target(
                data,
                spec,
                design,
                outcome,
                target,
                s1=s1,
                unconditional=args.unconditional,
                pice_df=args.pice_df,
                _sigma_hat2=sigma_hat2,
            )
            reports.append((target, rep, None))
        except TargetError as exc:
            any_target_error = True
            reports.append((target, None, str(exc)))

    label = "UMVCUE" if design.sigma_known else "PiCE"
    print(f"selection: {outcome.selected.label(spec.k)} (rule {outcome.rule_id})")
    header = f"{'target':>8}  {'MLE':>12}  {label:>12}  {'lower':>10}  {'upper':>10}  {'r':>6}"
    print(header)
    for target, rep, err in reports:
        name = target.label(spec.k)
        if rep is None:
            print(f"{name:>8}  error: {err}")
            continue
        value = rep.umvcue if rep.umvcue is not None else rep.pice
        print(
            f"{name:>8}  {rep.mle:>12.6f}  {value:>12.6f}  "
            f"{_fmt(rep.bounds_used.lower):>10}  {_fmt(rep.bounds_used.upper):>10}  {rep.r:>6.3g}"
        )

    if args.out:
        try:
            with open(args.out, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(
                    ["target", "mle", "umvcue", "pice", "lower", "upper", "v_pooled", "r", "sigma_source", "error"]
                )
                for target, rep, err in reports:
                    if rep is None:
                        writer.writerow([target.label(spec.k), "", "", "", "", "", "", "", "", err])
                    else:
                        writer.writerow(
                            [
                                target.label(spec.k),
                                repr(rep.mle),
                                "" if rep.umvcue is None else repr(rep.umvcue),
                                "" if rep.pice is None else repr(rep.pice),
                                repr(rep.bounds_used.lower),
                                repr(rep.bounds_used.upper),
                                repr(rep.v_pooled),
                                repr(rep.r),
                                rep.sigma_source,
                                "",
                            ]
                        )
        except OSError as exc:
            print(f"cannot write {args.out}: {exc}", file=sys.stderr)
            return EXIT_IO

    return EXIT_TARGET if any_target_error else EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if not cfg.scenarios:
        raise ConfigError("config defines no scenarios to simulate")
    if args.reps < 1:
        raise ConfigError("--reps must be at least 1")
    policy = RngPolicy(master_seed=args.seed)
    results = []
    for idx, scenario in enumerate(cfg.scenarios):
        results.append(
            run_scenario(
                scenario,
                cfg.population,
                cfg.design,
                cfg.design.rule,
                args.reps,
                policy.spawn(idx),
                mode=args.mode,
                workers=args.threads,
                pice_df=args.pice_df,
            )
        )
    table = bias_mse_table(results)
    print(table)
    csv_text = results_to_csv(results)
    out_path = args.out or cfg.output.get("csv")
    md_path = args.markdown or cfg.output.get("markdown")
    try:
        if out_path:
            with open(out_path, "w", newline="") as fh:
                fh.write(csv_text)
        if md_path:
            with open(md_path, "w") as fh:
                fh.write(table)
    except OSError as exc:
        print(f"cannot write output: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _cmd_verify(args: argparse.Namespace) -> int:
    checks = run_verification(args.level, args.seed, workers=args.threads)
    width = max(len(c.name) for c in checks)
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{c.name:<{width}}  {status}  metric={c.metric:.3g} (threshold {c.threshold:.3g})")
    failed = [c.name for c in checks if not c.passed]
    summary = {
        "level": args.level,
        "seed": args.seed,
        "passed": not failed,
        "failed_checks": failed,
        "checks": [c.to_json() for c in checks],
    }
    if args.json:
        try:
            with open(args.json, "w") as fh:
                json.dump(summary, fh, indent=2)
        except OSError as exc:
            print(f"cannot write {args.json}: {exc}", file=sys.stderr)
            return EXIT_IO
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "estimate":
            return _cmd_estimate(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        return _cmd_verify(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoEstimateAfterStop as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FUTILITY
    except TargetError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_TARGET
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EnrichestError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
