"""Benchmark harness: start points, campaigns, trace files and summaries."""

import csv
import io
import os
import re
import statistics
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .acquisition import UnsupportedMethodError
from .optimizer import METHODS, BoConfig, run
from .problems import PROBLEMS, get_problem
from .trace import RunTrace, TraceRow

DEFAULT_TOL = 1e-5
DEFAULT_RUNS = 5
DEFAULT_MAX_EVALS = 300
TRACE_NAME = re.compile(r"^(?P<problem>\w+?)_d(?P<dim>\d+)_(?P<method>\w+)_run(?P<run>\d+)\.csv$")


class TraceFormatError(ValueError):
    """A trace file does not follow the column layout."""


def lhs_starts(problem, n_runs: int = DEFAULT_RUNS, seed: int = 0):
    """Plain Latin hypercube points over the problem's box."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    sampler = qmc.LatinHypercube(d=problem.n_dim, seed=np.random.default_rng(seed))
    return list(qmc.scale(sampler.random(n_runs), problem.lb, problem.ub))


def _cell_seed(seed, problem, dim):
    # crc32 keeps the mapping stable across interpreter runs, unlike hash()
    return int(np.random.SeedSequence([seed, dim, zlib.crc32(problem.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------- trace files


def trace_header(n_d, n_g, n_h):
    return (
        ["eval"]
        + [f"x_{i}" for i in range(1, n_d + 1)]
        + ["f"]
        + [f"g_{i}" for i in range(1, n_g + 1)]
        + [f"h_{i}" for i in range(1, n_h + 1)]
        + ["merit", "best_merit", "stage", "tr_circle_ub", "tr_sigma_ub"]
    )


def _fmt(v) -> str:
    return repr(float(v))


def format_trace(trace: RunTrace) -> str:
    n_d = trace.rows[0].x.size if trace.rows else trace.n_dim
    n_g = trace.rows[0].g.size if trace.rows else 0
    n_h = trace.rows[0].h.size if trace.rows else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_header(n_d, n_g, n_h))
    for r in trace.rows:
        w.writerow(
            [str(r.eval_index)]
            + [_fmt(v) for v in r.x]
            + [_fmt(r.f)]
            + [_fmt(v) for v in r.g]
            + [_fmt(v) for v in r.h]
            + [_fmt(r.merit), _fmt(r.best_merit), "" if r.stage is None else str(r.stage)]
            + [_fmt(r.tr_circle_ub), _fmt(r.tr_sigma_ub)]
        )
    return buf.getvalue()


def write_trace(trace: RunTrace, path) -> Path:
    path = Path(path)
    path.write_text(format_trace(trace))
    return path


def trace_filename(problem, dim, method, run_index) -> str:
    return f"{problem}_d{dim}_{method}_run{run_index}.csv"


def _indexed(header, prefix):
    cols = [c for c in header if re.fullmatch(rf"{prefix}_\d+", c)]
    expect = [f"{prefix}_{i}" for i in range(1, len(cols) + 1)]
    if cols != expect:
        raise TraceFormatError(f"columns {prefix}_* must be numbered 1..n, got {cols}")
    return [header.index(c) for c in cols]


def ingest_external_trace(path, tol: float = DEFAULT_TOL) -> RunTrace:
    """Parse a trace CSV. ``best_merit`` is recomputed when it is not a running minimum."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TraceFormatError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    required = ["eval", "f", "merit", "best_merit", "stage", "tr_circle_ub", "tr_sigma_ub"]
    for col in required:
        if col not in header:
            raise TraceFormatError(f"{path}: missing column {col!r}")
    ix, ig, ih = _indexed(header, "x"), _indexed(header, "g"), _indexed(header, "h")
    if not ix:
        raise TraceFormatError(f"{path}: missing column 'x_1'")
    pos = {c: header.index(c) for c in required}

    def num(line_no, row, col_idx):
        try:
            return float(row[col_idx])
        except (ValueError, IndexError):
            raise TraceFormatError(
                f"{path}: row {line_no}, column {header[col_idx]!r}: not a number"
            ) from None

    out = []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise TraceFormatError(
                f"{path}: row {line_no} has {len(row)} fields, header has {len(header)}"
            )
        try:
            eval_index = int(row[pos["eval"]])
        except ValueError:
            raise TraceFormatError(f"{path}: row {line_no}, column 'eval': not an integer") from None
        stage_txt = row[pos["stage"]].strip()
        try:
            stage = int(stage_txt) if stage_txt else None
        except ValueError:
            raise TraceFormatError(f"{path}: row {line_no}, column 'stage': not an integer") from None
        out.append(
            TraceRow(
                eval_index=eval_index,
                x=np.array([num(line_no, row, i) for i in ix]),
                f=num(line_no, row, pos["f"]),
                g=np.array([num(line_no, row, i) for i in ig]),
                h=np.array([num(line_no, row, i) for i in ih]),
                merit=num(line_no, row, pos["merit"]),
                best_merit=num(line_no, row, pos["best_merit"]),
                stage=stage,
                tr_circle_ub=num(line_no, row, pos["tr_circle_ub"]),
                tr_sigma_ub=num(line_no, row, pos["tr_sigma_ub"]),
            )
        )
    for k, r in enumerate(out, start=1):
        if r.eval_index != k:
            raise TraceFormatError(f"{path}: eval indices must run 1..n; row {k + 1} has {r.eval_index}")

    running = np.minimum.accumulate([r.merit for r in out]) if out else []
    if any(r.best_merit != b for r, b in zip(out, running)):
        warnings.warn(f"{path}: best_merit is not the running minimum of merit; recomputed", stacklevel=2)
        for r, b in zip(out, running):
            r.best_merit = float(b)

    m = TRACE_NAME.match(path.name)
    trace = RunTrace(
        rows=out,
        problem=m["problem"] if m else path.stem,
        n_dim=len(ix),
        method=m["method"] if m else "external",
        run_index=int(m["run"]) if m else 0,
        tol=tol,
    )
    trace.converged = trace.final_best_merit < tol
    return trace


# ---------------------------------------------------------------- summaries


@dataclass
class CellSummary:
    problem: str
    n_dim: int
    method: str
    n_runs: int
    n_converged: int
    median_iters_to_tol: float | None
    final_merits: list = field(default_factory=list)
    unsupported: bool = False


@dataclass
class CampaignSummary:
    cells: list
    tol: float = DEFAULT_TOL

    def cell(self, problem, n_dim, method) -> CellSummary:
        for c in self.cells:
            if (c.problem, c.n_dim, c.method) == (problem, n_dim, method):
                return c
        raise KeyError((problem, n_dim, method))

    def to_text(self) -> str:
        return format_summary(self)


def summarize(traces, tol: float = DEFAULT_TOL, unsupported=()) -> CampaignSummary:
    """Per (problem, dimension, method) success counts and medians over converged runs."""
    traces = list(traces)
    if not traces and not unsupported:
        raise ValueError("no traces to summarize")
    groups = {}
    for t in traces:
        groups.setdefault((t.problem, t.n_dim, t.method), []).append(t)
    cells = []
    for key in sorted(groups):
        group = sorted(groups[key], key=lambda t: t.run_index)
        iters = [t.iterations_to_tol(tol) for t in group]
        done = [i for i in iters if i is not None]
        cells.append(
            CellSummary(
                problem=key[0],
                n_dim=key[1],
                method=key[2],
                n_runs=len(group),
                n_converged=len(done),
                median_iters_to_tol=statistics.median(done) if done else None,
                final_merits=[t.final_best_merit for t in group],
            )
        )
    for problem, dim, method, n_runs in unsupported:
        cells.append(CellSummary(problem, dim, method, n_runs, 0, None, [], unsupported=True))
    cells.sort(key=lambda c: (c.problem, c.n_dim, c.method))
    return CampaignSummary(cells, tol)


def format_summary(summary: CampaignSummary) -> str:
    lines = [f"# tolerance {summary.tol!r}", "problem,dim,method,runs,converged,median_iters,final_best_merits"]
    for c in summary.cells:
        if c.unsupported:
            lines.append(f"{c.problem},{c.n_dim},{c.method},{c.n_runs},unsupported,,")
            continue
        med = "" if c.median_iters_to_tol is None else repr(float(c.median_iters_to_tol))
        merits = " ".join(repr(float(m)) for m in c.final_merits)
        lines.append(f"{c.problem},{c.n_dim},{c.method},{c.n_runs},{c.n_converged},{med},{merits}")

    # converged counts per method and dimension, one number per problem
    problems = [p for p in PROBLEMS if any(c.problem == p for c in summary.cells)]
    problems += sorted({c.problem for c in summary.cells} - set(problems))
    dims = sorted({c.n_dim for c in summary.cells})
    methods = sorted({c.method for c in summary.cells})
    lines += ["", "# converged runs, " + "·".join(problems) + " per cell"]
    lines.append("method," + ",".join(f"d={d}" for d in dims))
    index = {(c.problem, c.n_dim, c.method): c for c in summary.cells}
    for m in methods:
        row = [m]
        for d in dims:
            parts = []
            for p in problems:
                c = index.get((p, d, m))
                parts.append("-" if c is None else ("u" if c.unsupported else str(c.n_converged)))
            row.append("·".join(parts))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- campaigns

_CONFIG_FIELDS = {f.name: f.type for f in fields(BoConfig)}


@dataclass
class CampaignSpec:
    problems: list
    dims: list
    methods: list
    n_runs: int = DEFAULT_RUNS
    seed: int = 0
    max_evals: int = DEFAULT_MAX_EVALS
    tol: float = DEFAULT_TOL
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for p in self.problems:
            if p not in PROBLEMS:
                raise ValueError(f"unknown problem {p!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if any(d < 2 for d in self.dims):
            raise ValueError("dimensions must be at least 2")
        if self.n_runs < 1 or self.max_evals < 1 or not self.tol > 0:
            raise ValueError("n_runs and max_evals must be >= 1 and tol > 0")
        # surface bad override values before any run starts
        self.bo_config(self.methods[0] if self.methods else "strong", 0)

    def bo_config(self, method, run_index) -> BoConfig:
        seed = int(np.random.SeedSequence([self.seed, run_index]).generate_state(1)[0])
        return BoConfig(
            method=method, max_evals=self.max_evals, merit_tol=self.tol, seed=seed, **self.overrides
        )


_INT_KEYS = {"n_runs", "seed", "max_evals"}
_LIST_KEYS = {"problem": "problems", "dim": "dims", "method": "methods"}


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; values may be comma lists."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def spec_from_mapping(values: dict) -> CampaignSpec:
    values = dict(values)
    kwargs, overrides = {}, {}
    for key, target in _LIST_KEYS.items():
        raw = values.pop(key, None)
        if raw is None:
            raw = values.pop(target, None)
        if raw is None:
            raise ValueError(f"missing key {key!r}")
        items = [s.strip() for s in str(raw).split(",") if s.strip()]
        kwargs[target] = [int(s) for s in items] if key == "dim" else items
    for key in list(values):
        raw = values.pop(key)
        if key in _INT_KEYS:
            kwargs[key] = int(raw)
        elif key == "tol":
            kwargs["tol"] = float(raw)
        elif key in _CONFIG_FIELDS and key not in ("method", "max_evals", "merit_tol", "seed", "trust_policy"):
            overrides[key] = int(raw) if _CONFIG_FIELDS[key] in (int, "int") else float(raw)
        else:
            raise ValueError(f"unknown key {key!r}")
    return CampaignSpec(overrides=overrides, **kwargs)


def _run_job(job):
    problem_name, dim, method, run_index, x0, config = job
    problem = get_problem(problem_name, dim)
    try:
        trace = run(problem, x0, config, name=problem_name)
    except Exception as exc:  # recorded as a failed run, the campaign continues
        trace = RunTrace(problem=problem_name, n_dim=dim, method=method, error=repr(exc))
    trace.run_index = run_index
    trace.tol = config.merit_tol
    return trace


def worker_count() -> int:
    raw = os.environ.get("CBO_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"CBO_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return os.cpu_count() or 1


def run_campaign(spec: CampaignSpec, out_dir=None, workers: int | None = None):
    """Run every (problem, dim, method, start) job; write traces and ``summary.txt``."""
    jobs, unsupported = [], []
    for p in spec.problems:
        for d in spec.dims:
            problem = get_problem(p, d)
            starts = lhs_starts(problem, spec.n_runs, _cell_seed(spec.seed, p, d))
            for m in spec.methods:
                cfg0 = spec.bo_config(m, 0)
                try:
                    cfg0.validate_for(problem)
                except UnsupportedMethodError:
                    unsupported.append((p, d, m, spec.n_runs))
                    continue
                for i, x0 in enumerate(starts):
                    jobs.append((p, d, m, i, x0, spec.bo_config(m, i)))

    workers = worker_count() if workers is None else max(1, workers)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            traces = list(pool.map(_run_job, jobs))
    else:
        traces = [_run_job(j) for j in jobs]

    summary = summarize(traces, spec.tol, unsupported) if (traces or unsupported) else CampaignSummary([], spec.tol)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for t in traces:
            write_trace(t, out / trace_filename(t.problem, t.n_dim, t.method, t.run_index))
        (out / "summary.txt").write_text(format_summary(summary))
    return summary, traces


def summarize_dir(path, tol: float = DEFAULT_TOL) -> CampaignSummary:
    files = sorted(Path(path).glob("*.csv"))
    if not files:
        raise ValueError(f"no trace files in {path}")
    return summarize([ingest_external_trace(f, tol) for f in files], tol)
