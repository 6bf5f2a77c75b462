"""Command-line entry point.

Exit codes: 0 success, 1 verdict or check mismatch, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import DEFAULT_CONTEXTS, DEFAULT_SIZES, check_rows, format_rows, run_bench
from .access import MAX_CONTEXTS
from .errors import MadtlsError, ScenarioError
from .pipeline import bundled_path, load_scenarios, run_scenario
from .vectors import check_vectors, format_vectors, generate_vectors

EXIT_OK, EXIT_MISMATCH, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list is empty")
    return values


def _resolve_scenario(text: str) -> Path:
    path = Path(text)
    if path.exists():
        return path
    bundled = bundled_path(text)
    return bundled if bundled.exists() else path


def _write(path: str | None, text: str) -> None:
    if path is None:
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ScenarioError([f"cannot write {path}: {exc.strerror or exc}"]) from None


def cmd_run(args) -> int:
    scenarios = load_scenarios(_resolve_scenario(args.scenario))
    reports = [run_scenario(s, seed=args.seed) for s in scenarios]
    for report in reports:
        print(report.to_text())
    ok = all(r.ok for r in reports)
    if args.out:
        _write(args.out, json.dumps({"ok": ok, "reports": [r.to_dict() for r in reports]}, indent=2,
                                    sort_keys=True) + "\n")
    print(f"{sum(r.ok for r in reports)}/{len(reports)} scenarios matched expectations")
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_validate(args) -> int:
    scenarios = load_scenarios(_resolve_scenario(args.scenario))
    for s in scenarios:
        print(f"{s.name}: ok ({len(s.entities)} entities, {len(s.contexts)} contexts, {len(s.traffic)} messages)")
    return EXIT_OK


def cmd_vectors(args) -> int:
    if args.check:
        try:
            text = Path(args.check).read_text()
        except OSError as exc:
            raise ScenarioError([f"cannot read {args.check}: {exc.strerror or exc}"]) from None
        problems = check_vectors(text)
        for p in problems:
            print(p)
        print("vectors verify" if not problems else f"{len(problems)} problem(s)")
        return EXIT_OK if not problems else EXIT_MISMATCH
    text = format_vectors(generate_vectors(args.seed))
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    bad = [c for c in args.contexts if not 1 <= c <= MAX_CONTEXTS] + [s for s in args.sizes if not 1 <= s <= 4096]
    if bad or args.reps < 1:
        print(f"bench parameters out of range: {bad or ['--reps']}", file=sys.stderr)
        return EXIT_USAGE
    rows = run_bench(args.contexts, args.sizes, args.reps, args.seed)
    print(format_rows(rows))
    problems = check_rows(rows)
    for p in problems:
        print(f"check failed: {p}")
    if not problems:
        print("checks: MAC calls linear in contexts, write/read ratio 2, independent of context size")
    if args.out:
        _write(args.out, json.dumps({"rows": [r.as_dict() for r in rows], "problems": problems}, indent=2) + "\n")
    return EXIT_OK if not problems else EXIT_MISMATCH


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="madtls", description="Middlebox-aware DTLS simulator and tools.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario file or bundled scenario")
    run.add_argument("--scenario", required=True, help="scenario file, or the name of a bundled scenario")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--out", help="write the JSON report here")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="check a scenario file without running it")
    val.add_argument("--scenario", required=True)
    val.set_defaults(func=cmd_validate)

    vec = sub.add_parser("vectors", help="write or check golden test vectors")
    vec.add_argument("--seed", type=int, default=0)
    vec.add_argument("--out", help="output file (default: stdout)")
    vec.add_argument("--check", metavar="PATH", help="verify an existing vector file instead")
    vec.set_defaults(func=cmd_vectors)

    bench = sub.add_parser("bench", help="MAC-call counts and timings over a context sweep")
    bench.add_argument("--contexts", type=_int_list, default=list(DEFAULT_CONTEXTS))
    bench.add_argument("--sizes", type=_int_list, default=list(DEFAULT_SIZES), help="context sizes in bytes")
    bench.add_argument("--reps", type=int, default=20)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", help="write rows as JSON here")
    bench.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        for v in exc.violations:
            print(f"error: {v}", file=sys.stderr)
        return EXIT_USAGE
    except MadtlsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
