"""Command-line entry point: ``owdisc <stage> [--config C] [--seed S] [--out DIR]``.

On success the written files are listed as JSON on stdout and the exit code
is 0. On failure a JSON object ``{"error", "message", "file"?, "line"?}``
goes to stderr and the exit code is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import sys

from owdisc.pipeline import stages
from owdisc.pipeline.config import ConfigError, load_config
from owdisc.pipeline.io import SchemaError

COMMANDS = {
    "generate": stages.stage_generate,
    "fuse": stages.stage_fuse,
    "train-embed": stages.stage_train,
    "cluster": stages.stage_cluster,
    "evaluate": stages.stage_evaluate,
    "report": stages.stage_report,
    "bench-cluster": stages.stage_bench,
    "run": stages.run_all,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="owdisc", description="Open-world object discovery pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        p.add_argument("--out", default="run", help="run directory (default: ./run)")
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    payload = {"error": kind, "message": message, **extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**63:
                raise ConfigError("seed must be a non-negative 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        written = COMMANDS[args.command](cfg, args.out)
    except SchemaError as exc:
        return _fail("schema", str(exc), 1, file=exc.path, line=exc.line)
    except ConfigError as exc:
        return _fail("config", str(exc), 1)
    except (OSError, ValueError, RuntimeError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)
    sys.stdout.write(json.dumps({"command": args.command, "outputs": [str(p) for p in written]}) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
