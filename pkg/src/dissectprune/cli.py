"""Command line entry point: ``dissectprune <command> --config PATH [--out DIR]``.

Exit codes: 0 success, 1 validation error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, check, validate_config
from .pipeline import STATE_FILE, Experiment, StageFailure

log = logging.getLogger("dissectprune")


def _load(args) -> tuple[ExperimentConfig, Path]:
    if args.config:
        cfg = validate_config(args.config)
        base = Path(args.config).resolve().parent
    else:
        cfg, base = ExperimentConfig(), Path.cwd()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    overrides = {}
    for key in ("fraction", "scope", "mode", "rewind_epoch"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if overrides:
        cfg.pruning = dataclasses.replace(cfg.pruning, **overrides)
    errors = check(cfg, base)
    if errors:
        raise ConfigError(errors)
    return cfg, base


def _experiment(args) -> Experiment:
    cfg, base = _load(args)
    out = Path(args.out or cfg.output_root)
    if getattr(args, "resume", False) and not (out / STATE_FILE).is_file():
        raise ConfigError([("--resume", f"no {STATE_FILE} under {out}")])
    return Experiment(cfg, out, base)


def cmd_validate(args) -> None:
    cfg, _ = _load(args)
    print(f"ok: {args.config or '<defaults>'} (config hash {cfg.digest()[:12]})")


def cmd_gen_data(args) -> None:
    exp = _experiment(args)
    print(exp.stage_data())


def cmd_train(args) -> None:
    exp = _experiment(args)
    for seed in exp.config.seeds:
        exp.stage_baseline(seed)
        print(exp.trial_dir(seed) / "train")


def cmd_prune(args) -> None:
    exp = _experiment(args)
    rounds = [args.round] if args.round is not None else range(1, exp.config.pruning.rounds + 1)
    for seed in exp.config.seeds:
        for r in rounds:
            exp.stage_prune(seed, r)
            print(exp.round_dir(seed, r))


def cmd_dissect(args) -> None:
    exp = _experiment(args)
    rounds = [args.round] if args.round is not None else range(exp.config.pruning.rounds + 1)
    for seed in exp.config.seeds:
        for r in rounds:
            report = exp.stage_dissect(seed, r)
            n = sum(u.interpretable for u in report.units)
            print(f"{exp.round_dir(seed, r) / 'report.json'}: {n}/{len(report.units)} interpretable units")


def cmd_report(args) -> None:
    exp = _experiment(args)
    exp.stage_report()
    print(exp.out)


def cmd_run(args) -> None:
    exp = _experiment(args)
    exp.run()
    print(exp.out)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--out", help="output directory (default: config output_root)")
    common.add_argument("--seed", type=int, help="run a single trial with this seed")
    common.add_argument("--resume", action="store_true", help="require and continue an existing run")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dissectprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("validate", parents=[common], help="check a config file").set_defaults(fn=cmd_validate)
    sub.add_parser("gen-data", parents=[common], help="generate the micro-Broden dataset").set_defaults(fn=cmd_gen_data)
    sub.add_parser("train", parents=[common], help="train the baseline network").set_defaults(fn=cmd_train)
    p = sub.add_parser("prune", parents=[common], help="run pruning rounds")
    p.add_argument("--round", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--scope", choices=("global", "layer"))
    p.add_argument("--mode", choices=("rewind", "standard-finetune"))
    p.add_argument("--rewind-epoch", dest="rewind_epoch", type=int)
    p.set_defaults(fn=cmd_prune)
    p = sub.add_parser("dissect", parents=[common], help="dissect the baseline and pruned networks")
    p.add_argument("--round", type=int)
    p.set_defaults(fn=cmd_dissect)
    sub.add_parser("report", parents=[common], help="write CSV tables and figures").set_defaults(fn=cmd_report)
    sub.add_parser("run", parents=[common], help="full pipeline").set_defaults(fn=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        args.fn(args)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return 1
    except StageFailure as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
