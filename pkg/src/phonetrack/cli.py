"""Command-line entry point: ``phonetrack <command> [<action>] --config run.json``.

Exit codes: 0 success, 1 usage or config validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Sequence

from .config import ConfigError, load_config
from .pipeline import pipeline_stages, run_pipeline, run_stage, verify_run_manifest

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# CLI flag -> dotted config key; each flag overrides the config file
SHARED_OVERRIDES = {"seed": "seed"}
COMMAND_OVERRIDES: dict[str, dict[str, tuple[str, type]]] = {
    "synth": {"n_subjects": ("synth.n_subjects", int), "duration_s": ("synth.duration_s", float),
              "snr_db": ("synth.snr_db", float)},
    "trf": {"window_ms": ("trf.window_ms", float)},
    "mm": {"max_epochs": ("mm.train.max_epochs", int), "patience": ("mm.train.patience", int),
           "window_s": ("mm.segmentation.window_s", float)},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime failures here
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_common(p: argparse.ArgumentParser, command: str) -> None:
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="top-level seed, overrides the config")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key by dotted path, e.g. mm.train.max_epochs=5")
    for dest, (key, typ) in COMMAND_OVERRIDES.get(command, {}).items():
        p.add_argument("--" + dest.replace("_", "-"), dest=dest, type=typ, help=f"overrides {key}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="phonetrack", description="Phonetic speech features and EEG modelling pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    for name, help_text in (("synth", "generate a synthetic corpus"),
                            ("preprocess", "filter, resample and re-reference EEG"),
                            ("encode", "encode alignments into feature matrices")):
        _add_common(sub.add_parser(name, help=help_text), name)
    groups = {"trf": ("forward TRF models", ("fit", "eval", "export")),
              "mm": ("match-mismatch classifier", ("build", "train", "finetune", "eval")),
              "stats": ("paired statistics", ("compare",)),
              "pipeline": ("all stages in order", ("run",))}
    for name, (help_text, actions) in groups.items():
        g = sub.add_parser(name, help=help_text)
        acts = g.add_subparsers(dest="action", metavar="<action>", parser_class=_Parser)
        for act in actions:
            _add_common(acts.add_parser(act), name)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key] = _parse_value(value)
    for dest, (key, _) in COMMAND_OVERRIDES.get(args.command, {}).items():
        if getattr(args, dest, None) is not None:
            out[key] = getattr(args, dest)
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def cli_dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("phonetrack: error: a command is required")
        action = getattr(args, "action", None)
        if args.command in ("trf", "mm", "stats", "pipeline") and action is None:
            raise UsageError(f"phonetrack {args.command}: error: an action is required")
        overrides = _overrides(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID

    out = cfg.output_dir(args.out)
    try:
        if args.command == "pipeline":
            written = run_pipeline(cfg, out)
            problems = verify_run_manifest(out)
            if problems:
                print("manifest verification failed:\n  " + "\n  ".join(problems), file=sys.stderr)
                return EXIT_RUNTIME
            n = sum(len(v) for v in written.values())
            print(f"{len(pipeline_stages(cfg))} stages, {n} files written to {out}")
        else:
            stage = f"{args.command} {action}" if action else args.command
            written = run_stage(cfg, out, stage)
            print(f"{stage}: {len(written)} files written to {out}")
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        logging.getLogger(__name__).debug("stage failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
