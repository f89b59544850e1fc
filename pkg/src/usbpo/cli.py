"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .exceptions import DataError, UsageError, VerificationError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3


def _print(*args, **kw):
    print(*args, **kw, flush=True)


def cmd_train(args) -> int:
    from .config import load_config
    from .orchestrator import train

    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.variant is not None:
        overrides["variant"] = args.variant
    config = config.with_overrides(**overrides)

    def progress(rec):
        if not args.quiet:
            _print(f"epoch {rec.epoch:3d}  return {rec.eval_return_mean:9.2f} +- {rec.eval_return_std:7.2f}  "
                   f"shift {rec.shift_before:.4f}->{rec.shift_after:.4f}  "
                   f"bias {rec.bias_before:.4f}->{rec.bias_after:.4f}")

    train(config, args.out, progress=progress)
    _print(f"run written to {args.out}")
    return EXIT_OK


def cmd_verify_bounds(args) -> int:
    from .mdpexact import REPORT_MODE, delta_magnitude_summary, run_trials, slack_histogram

    if args.trials < 0:
        raise UsageError("--trials must be >= 0")
    reports = run_trials(args.trials, args.states, args.actions, args.gamma, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for rep in reports:
            fh.write(rep.to_json() + "\n")
    hists = [slack_histogram(reports, tid) for tid in REPORT_MODE]
    hist_path = out.with_name(out.name + ".histograms.json")
    hist_path.write_text(json.dumps(hists, indent=1) + "\n")
    for h in hists:
        _print(f"histogram {h['theorem']}: counts={h['counts']}"
               + (f" min={h['min']:.4g} median={h['median']:.4g}" if h["counts"] else ""))
    if reports:
        summary = delta_magnitude_summary(reports)
        _print("delta magnitude: median |delta|={median_abs_delta:.4g} median shift={median_shift:.4g} "
               "median bias={median_bias:.4g}".format(**summary))
    failed = [r for r in reports if r.mode == "assert" and not r.passed]
    _print(f"{args.trials} trials, {len(reports)} reports, {len(failed)} assert-mode failures -> {out}")
    if failed:
        for r in failed[:10]:
            _print(f"FAIL {r.theorem} seed={r.seed} slack={r.slack:.3e}")
        raise VerificationError(f"offending trial seed {failed[0].seed}")
    return EXIT_OK


def cmd_w2_selftest(args) -> int:
    from .gaussmetrics import oracle_suite

    checks, lines = oracle_suite(pairs=args.pairs, seed=args.seed,
                                 trace_sign=-1.0 if args.inject_fault else 1.0)
    for line in lines:
        _print(line)
    for c in checks:
        _print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: max deviation {c.max_deviation:.3e} "
               f"(tolerance {c.tolerance:g})")
    if not all(c.passed for c in checks):
        raise VerificationError("W2 oracle suite failed")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .nncore.params import read_checkpoint
    from .orchestrator import evaluate
    from .policy import SacAgent

    try:
        tensors = read_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise UsageError(f"no such checkpoint: {args.checkpoint}") from None
    agent = SacAgent.from_tensors(tensors, prefix="agent.")
    mean, std = evaluate(agent, args.task, args.episodes, seed=args.seed)
    _print(f"{mean:.4f} ± {std:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .config import load_config
    from .orchestrator import train

    base = load_config(args.config)
    root = Path(args.out)
    rows = []
    lrs = args.phase2_lrs or [base.model.phase2_lr]
    for variant in args.variants:
        for lr in lrs:
            for seed in args.seeds:
                tag = f"{variant}_lr{lr:g}_seed{seed}" if args.phase2_lrs else f"{variant}_seed{seed}"
                state = train(base.with_overrides(seed=seed, variant=variant, phase2_lr=lr), root / tag)
                final = state.records[-1].eval_return_mean
                rows.append((variant, lr, seed, final))
                _print(f"{tag}: final return {final:.2f}")
    with open(root / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("variant", "phase2_lr", "seed", "final_return"))
        writer.writerows((v, repr(lr), s, repr(f)) for v, lr, s, f in rows)
    for variant in args.variants:
        for lr in lrs:
            vals = [f for v, l, _, f in rows if v == variant and l == lr]
            _print(f"{variant} lr={lr:g}: mean final return {np.mean(vals):.2f} over {len(vals)} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usbpo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("full", "shift_only", "bias_only", "none"))
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("verify-bounds", help="check the bound chain on random tabular MDPs")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--states", type=int, default=5)
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bounds.jsonl")
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("w2-selftest", help="compare W2 closed forms with sampling and SDP oracles")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_w2_selftest)

    p = sub.add_parser("eval", help="evaluate a checkpointed policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="pendulum")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every variant over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variants", nargs="+", default=["full", "shift_only", "bias_only", "none"],
                   choices=("full", "shift_only", "bias_only", "none"))
    p.add_argument("--phase2-lrs", type=float, nargs="+")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VerificationError as exc:
        _print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (UsageError, DataError) as exc:
        _print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        _print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
