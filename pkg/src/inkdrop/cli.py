"""Command-line entry point: one subcommand per pipeline stage plus run, baseline and report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import ConfigError
from .harness import (
    STAGES,
    BaselineSpec,
    Pipeline,
    StageError,
    default_out,
    emit_report,
    load_report,
    read_config,
    run_trials,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI config file (defaults apply when omitted)")
    p.add_argument("--out", type=Path, default=None, help="artifact directory (default: $INKDROP_OUT or ./inkdrop-runs)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", action="store_true", help="reuse stages whose inputs and checksums are unchanged")
    p.add_argument("--force", action="store_true", help="recompute stale stages and override the run lock")
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inkdrop", description="Backdoor injection into distribution-matching "
                                     "dataset condensation, with a resumable artifact pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run the pipeline up to the {stage} stage"))
    run = sub.add_parser("run", help="run the full pipeline")
    _common(run)
    run.add_argument("--trials", type=int, default=1, help="repeat with seeds seed..seed+N-1 and aggregate")
    base = sub.add_parser("baseline", help="run the naive patch baseline")
    _common(base)
    base.add_argument("--patch-size", type=int, default=3)
    base.add_argument("--patch-row", type=int, default=None, help="top row of the patch (default: bottom edge)")
    base.add_argument("--patch-col", type=int, default=None, help="left column of the patch (default: right edge)")
    base.add_argument("--patch-value", type=float, default=1.0)
    base.add_argument("--trials", type=int, default=1)
    rep = sub.add_parser("report", help="compare finished runs")
    rep.add_argument("manifests", nargs="+", type=Path, help="manifest.json files or run directories")
    rep.add_argument("--out", type=Path, default=None)
    rep.add_argument("--force", action="store_true", help="allow manifests from different datasets")
    rep.add_argument("--control", action="store_true", help="include each run's clean-condensation control")
    rep.add_argument("-v", "--verbose", action="store_true")
    return parser


def _manifests(paths: list[Path]) -> list[Path]:
    found = []
    for p in paths:
        if p.is_dir():
            found.extend(sorted(p.glob("manifest*.json")))
        else:
            found.append(p)
    return found


def _summary(out: Path, manifest: dict) -> str:
    if manifest.get("report") is None:
        return json.dumps({"stages": sorted(manifest["stages"])})
    rep = load_report(out, manifest)
    ctl = load_report(out, manifest, "control_report")
    return (f"{manifest['method']}: CTA {rep.cta:.4f} (control {ctl.cta:.4f})  ASR {rep.asr:.4f}  "
            f"PSNR {rep.psnr:.2f} dB  SSIM {rep.ssim:.4f}  IS-dagger {rep.is_dagger:.4f}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            out = args.out or default_out() / "report"
            rows = emit_report(_manifests(args.manifests), out, force=args.force, include_control=args.control)
            for r in rows:
                print(",".join(str(v) for v in r.values()))
            return EXIT_OK

        config, text = read_config(args.config, args.seed)
        out = args.out or default_out()
        baseline = None
        if args.command == "baseline":
            baseline = BaselineSpec(size=args.patch_size, row=args.patch_row, col=args.patch_col,
                                    value=args.patch_value)
        trials = getattr(args, "trials", 1)
        if trials != 1:
            summary = run_trials(config, out, trials, resume=args.resume, force=args.force, baseline=baseline)
            for metric in summary["mean"]:
                print(f"{metric}: {summary['mean'][metric]:.4f} +/- {summary['std'][metric]:.4f}")
            return EXIT_OK
        until = args.command if args.command in STAGES else "evaluate"
        manifest = Pipeline(config, out, text, resume=args.resume, force=args.force, baseline=baseline).run(until)
        print(_summary(out, manifest))
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
