"""``cbo`` command line: single runs, campaigns, summaries and acceptance checks."""

import argparse
import sys
from pathlib import Path

from . import bench
from .acquisition import UnsupportedMethodError
from .optimizer import METHODS, BoConfig, run
from .problems import PROBLEMS, get_problem

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser():
    p = _Parser(prog="cbo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="optimize one problem from one Latin hypercube start")
    r.add_argument("--problem", required=True, choices=sorted(PROBLEMS))
    r.add_argument("--dim", type=int, required=True)
    r.add_argument("--method", default="strong", choices=METHODS)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--run-index", type=int, default=0, help="which start of the LHS design to use")
    r.add_argument("--n-runs", type=int, default=bench.DEFAULT_RUNS, help="size of the LHS design")
    r.add_argument("--max-evals", type=int, default=bench.DEFAULT_MAX_EVALS)
    r.add_argument("--tol", type=float, default=bench.DEFAULT_TOL)
    r.add_argument("--out", type=Path, default=None, help="directory for the trace CSV")

    c = sub.add_parser("campaign", help="run a grid of problems, dimensions and methods")
    c.add_argument("--config", type=Path, default=None, help="flat key=value file")
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--problem", default=None, help="comma list; overrides the file")
    c.add_argument("--dim", default=None)
    c.add_argument("--method", default=None)
    c.add_argument("--n-runs", default=None)
    c.add_argument("--seed", default=None)
    c.add_argument("--max-evals", default=None)
    c.add_argument("--tol", default=None)

    s = sub.add_parser("summarize", help="summarize a directory of trace CSVs")
    s.add_argument("traces", type=Path)
    s.add_argument("--tol", type=float, default=bench.DEFAULT_TOL)
    s.add_argument("--out", type=Path, default=None, help="write the summary here as well")

    k = sub.add_parser("check", help="run the acceptance checks")
    k.add_argument("--only", default=None, help="comma list of check numbers")
    k.add_argument("--quick", action="store_true", help="skip the convergence campaigns")
    return p


def _cmd_run(a):
    if a.dim < 2:
        raise UsageError("--dim must be at least 2")
    if not 0 <= a.run_index < a.n_runs:
        raise UsageError("--run-index must lie in [0, --n-runs)")
    problem = get_problem(a.problem, a.dim)
    spec = bench.CampaignSpec([a.problem], [a.dim], [a.method], a.n_runs, a.seed, a.max_evals, a.tol)
    x0 = bench.lhs_starts(problem, a.n_runs, bench._cell_seed(a.seed, a.problem, a.dim))[a.run_index]
    config = spec.bo_config(a.method, a.run_index)
    try:
        trace = run(problem, x0, config, name=a.problem)
    except UnsupportedMethodError as exc:
        raise UsageError(str(exc)) from exc
    trace.run_index = a.run_index
    if a.out is not None:
        a.out.mkdir(parents=True, exist_ok=True)
        path = bench.write_trace(trace, a.out / bench.trace_filename(a.problem, a.dim, a.method, a.run_index))
        print(f"trace written to {path}")
    status = "converged" if trace.converged else "not converged"
    print(f"{a.problem} d={a.dim} {a.method} run {a.run_index}: {status} after {len(trace)} evaluations, "
          f"best merit {trace.final_best_merit!r}")
    if trace.error:
        print(f"error: {trace.error}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _cmd_campaign(a):
    values = {}
    if a.config is not None:
        try:
            values = bench.parse_config_text(a.config.read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
    for key in ("problem", "dim", "method", "n_runs", "seed", "max_evals", "tol"):
        v = getattr(a, key)
        if v is not None:
            values[key] = v
    try:
        spec = bench.spec_from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid campaign: {exc}") from exc
    summary, traces = bench.run_campaign(spec, a.out)
    sys.stdout.write(bench.format_summary(summary))
    failed = [t for t in traces if t.error]
    for t in failed:
        print(f"run failed: {t.problem} d={t.n_dim} {t.method} run {t.run_index}: {t.error}", file=sys.stderr)
    return EXIT_RUN if failed else EXIT_OK


def _cmd_summarize(a):
    try:
        summary = bench.summarize_dir(a.traces, a.tol)
    except bench.TraceFormatError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_RUN
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = bench.format_summary(summary)
    sys.stdout.write(text)
    if a.out is not None:
        a.out.write_text(text)
    return EXIT_OK


def _cmd_check(a):
    from .acceptance import CHECKS, SLOW_CHECKS

    if a.only:
        try:
            numbers = [int(s) for s in a.only.split(",") if s.strip()]
        except ValueError:
            raise UsageError("--only expects comma-separated integers") from None
        bad = [n for n in numbers if n not in CHECKS]
        if bad:
            raise UsageError(f"unknown checks {bad}")
    else:
        numbers = sorted(CHECKS)
    if a.quick:
        numbers = [n for n in numbers if n not in SLOW_CHECKS]
    ok = True
    for n in numbers:
        res = CHECKS[n]()
        print(res.line(), flush=True)
        ok &= res.passed
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"run": _cmd_run, "campaign": _cmd_campaign, "summarize": _cmd_summarize, "check": _cmd_check}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
