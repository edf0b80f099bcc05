"""Command line: ``run``, ``verify-theory`` and ``hist``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 a theory check failed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import parse_config
from .errors import ConfigError, DataError, SpuroodError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_THEORY = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spurood", description="Spurious-correlation OOD detection laboratory.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run an experiment plan")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", help="output directory (overrides the config's 'out')")

    p = sub.add_parser("verify-theory", help="numerically check the Gaussian-world results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for the report and figure CSVs")
    p.add_argument("--beta-offset", type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser("hist", help="bin a score dump into 50 uniform bins")
    p.add_argument("--scores", required=True, help="SCR1 score file")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--bins", type=int, default=50, help=argparse.SUPPRESS)
    return parser


def _cmd_run(args) -> int:
    from .runner import run

    plan = parse_config(args.config)
    out = args.out or plan.out
    if not out:
        raise _UsageError("spurood run: no output directory (--out or 'out' key)")
    path = run(plan, out)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from .theory import verify_theory

    Path(args.out).mkdir(parents=True, exist_ok=True)
    report = verify_theory(args.seed, args.out, beta_offset=args.beta_offset)
    sys.stdout.write(report.text())
    return EXIT_OK if report.passed else EXIT_THEORY


def _cmd_hist(args) -> int:
    from .runner import write_histogram
    from .storage import load_scores

    id_scores, ood_scores = load_scores(args.scores)
    write_histogram(args.out, id_scores, ood_scores, args.bins)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cmd = {"run": _cmd_run, "verify-theory": _cmd_verify, "hist": _cmd_hist}[args.command]
        return cmd(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if getattr(args, "command", None) == "run" and exc.filename == args.config else EXIT_DATA
    except SpuroodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
