"""Command line entry point: teach, train, theory, and compare commands."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import plots, runner, theory
from .config import MODES, load_config
from .errors import BlockKDError, ConfigError


def _parse_stones(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --stones value '{text}'") from exc


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = cfg.with_overrides(
        seed=args.seed,
        stones=_parse_stones(args.stones) if args.stones is not None else None,
        mode=args.mode)
    report, out_dir = runner.run_train(cfg)
    print(f"final test accuracy {report.final_test_acc:.4f} "
          f"({report.mean_ms_per_batch:.1f} ms/batch); outputs in {out_dir}")
    return 0


def cmd_teach(args) -> int:
    cfg = load_config(args.config)
    report, out_dir = runner.run_teach(cfg)
    print(f"teacher test accuracy {report.final_test_acc:.4f}; "
          f"checkpoint {out_dir / 'teacher.bkdc'}")
    return 0


def _write_rows(path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


def cmd_theory(args) -> int:
    if args.seeds <= 0:
        print("theory: need at least one seed (--seeds N)", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = list(range(args.seeds))

    if args.check == "hightemp":
        rows, failures = theory.run_hightemp(seeds)
        _write_rows(out_dir / "hightemp.csv",
                    ["seed", "tau", "exact_norm", "approx_norm", "rel_err"], rows)
        plots.save_hightemp_figure(rows, out_dir / "fig_hightemp.png")
    elif args.check == "taylor":
        rows, failures = theory.run_taylor(seeds)
        _write_rows(out_dir / "taylor.csv", ["seed", "tail", "eps", "rel_err"],
                    rows)
        plots.save_taylor_figure(rows, out_dir / "fig_taylor.png")
    else:
        rows, failures = theory.run_pull(seeds)
        _write_rows(out_dir / "pull.csv", ["seed", "step", "distance"], rows)
        plots.save_pull_figure(rows, out_dir / "fig_pull.png")

    if failures:
        for note in failures:
            print(f"theory {args.check}: {note}", file=sys.stderr)
        return 1
    print(f"theory {args.check}: all {args.seeds} seeds within tolerance; "
          f"report in {out_dir}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    summary, out_dir = runner.run_compare(cfg, args.grid,
                                          seeds=list(range(args.seeds)))
    width = max(len(s["variant"]) for s in summary)
    for s in summary:
        print(f"{s['variant']:{width}s}  acc {s['test_acc_mean']:.4f} "
              f"+- {s['test_acc_std']:.4f}   {s['ms_per_batch_mean']:6.1f} ms/batch")
    print(f"summary in {out_dir / 'summary.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockkd",
        description="Block-wise logit distillation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a student per the config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stones", default=None,
                   help="comma-separated stone indices; empty for none")
    p.add_argument("--mode", choices=MODES, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("teach", help="pretrain and checkpoint the teacher")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_teach)

    p = sub.add_parser("theory", help="run the gradient-analysis checks")
    p.add_argument("--check", choices=("hightemp", "taylor", "pull"),
                   required=True)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--out", default="runs/theory")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("compare", help="run an ablation grid over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", default="losses",
                   help="'losses', 'stones', or 'stones:i,j;...'")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BlockKDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
