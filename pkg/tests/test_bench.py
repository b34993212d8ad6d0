import warnings

import numpy as np
import pytest

from cbo import bench
from cbo.optimizer import BoConfig, run
from cbo.problems import get_problem
from cbo.trace import RunTrace, TraceRow


def make_trace(merits, problem="quad", method="strong", n_g=1, n_h=0, run_index=0):
    rows = []
    best = np.inf
    for k, m in enumerate(merits, start=1):
        best = min(best, m)
        rows.append(
            TraceRow(k, np.array([0.1 * k, -0.2]), 1.0 / k, np.full(n_g, -0.5), np.zeros(n_h), m, best,
                     None if k == 1 else 1, 0.25, 0.5)
        )
    return RunTrace(rows, problem, 2, method, run_index)


def test_lhs_starts_one_per_stratum():
    prob = get_problem("quad", 3)
    pts = np.array(bench.lhs_starts(prob, 5, seed=2))
    assert pts.shape == (5, 3)
    strata = np.floor((pts - prob.lb) / (prob.ub - prob.lb) * 5).astype(int)
    for j in range(3):
        assert sorted(strata[:, j]) == list(range(5))
    np.testing.assert_array_equal(pts, bench.lhs_starts(prob, 5, seed=2))
    with pytest.raises(ValueError):
        bench.lhs_starts(prob, 0)


def test_trace_round_trip(tmp_path):
    prob = get_problem("prod", 2)
    trace = run(prob, np.array([0.3, 0.8]), BoConfig(max_evals=4, n_hyper_starts=5), name="prod")
    path = bench.write_trace(trace, tmp_path / bench.trace_filename("prod", 2, "strong", 3))
    back = bench.ingest_external_trace(path)
    assert back.rows == trace.rows
    assert (back.problem, back.n_dim, back.method, back.run_index) == ("prod", 2, "strong", 3)
    assert bench.format_trace(back) == path.read_text()


def test_header_layout():
    assert bench.trace_header(2, 1, 1) == [
        "eval", "x_1", "x_2", "f", "g_1", "h_1", "merit", "best_merit", "stage", "tr_circle_ub", "tr_sigma_ub",
    ]


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


HEADER = "eval,x_1,f,merit,best_merit,stage,tr_circle_ub,tr_sigma_ub\n"


@pytest.mark.parametrize(
    "body,message",
    [
        ("eval,x_1,f,merit,stage,tr_circle_ub,tr_sigma_ub\n1,0,0,0,,1,1\n", "best_merit"),
        (HEADER + "1,0,abc,1,1,,1,1\n", "column 'f'"),
        (HEADER + "1,0,0,1,1,,1\n", "row 2"),
        (HEADER + "2,0,0,1,1,,1,1\n", "1..n"),
        ("eval,x_2,f,merit,best_merit,stage,tr_circle_ub,tr_sigma_ub\n", "x_*"),
        (HEADER + "1,0,0,1,1,x,1,1\n", "stage"),
        ("", "empty"),
    ],
)
def test_ingest_errors_name_the_problem(tmp_path, body, message):
    with pytest.raises(bench.TraceFormatError, match=message.replace("*", r"\*")):
        bench.ingest_external_trace(write(tmp_path, body))


def test_ingest_recomputes_best_merit(tmp_path):
    p = write(tmp_path, HEADER + "1,0,0,3.0,3.0,,1,1\n2,0,0,1.0,3.0,1,1,1\n3,0,0,2.0,2.0,1,1,1\n")
    with pytest.warns(UserWarning, match="running minimum"):
        trace = bench.ingest_external_trace(p)
    np.testing.assert_array_equal(trace.best_merits, [3.0, 1.0, 1.0])
    assert trace.method == "external"


def test_summarize_counts_and_medians():
    traces = [
        make_trace([1.0, 1e-6], run_index=0),
        make_trace([1.0, 0.5, 0.1, 1e-7], run_index=1),
        make_trace([1.0, 0.5], run_index=2),
    ]
    s = bench.summarize(traces, tol=1e-5)
    c = s.cell("quad", 2, "strong")
    assert (c.n_runs, c.n_converged, c.median_iters_to_tol) == (3, 2, 3.0)
    assert c.final_merits == [1e-6, 1e-7, 0.5]
    with pytest.raises(KeyError):
        s.cell("prod", 2, "strong")
    with pytest.raises(ValueError):
        bench.summarize([])


def test_format_summary_table():
    traces = [make_trace([1e-6], problem=p) for p in ("rosen", "quad")]
    s = bench.summarize(traces, unsupported=[("prod", 2, "strong", 5)])
    text = bench.format_summary(s)
    assert "prod,2,strong,5,unsupported,," in text
    assert "strong,1·u·1" in text
    assert text.endswith("\n")


def test_config_parsing():
    values = bench.parse_config_text("# campaign\nproblem = quad, rosen\ndim=2,5\nmethod=strong\nn-runs=3\nomega=0.5\n")
    spec = bench.spec_from_mapping(values)
    assert spec.problems == ["quad", "rosen"] and spec.dims == [2, 5] and spec.n_runs == 3
    assert spec.bo_config("strong", 0).omega == 0.5
    with pytest.raises(ValueError, match="line 2"):
        bench.parse_config_text("problem=quad\nnonsense\n")
    for bad in (
        {"dim": "2", "method": "strong"},
        {"problem": "quad", "dim": "2", "method": "strong", "colour": "red"},
        {"problem": "quad", "dim": "1", "method": "strong"},
        {"problem": "quad", "dim": "2", "method": "magic"},
        {"problem": "quad", "dim": "2", "method": "strong", "rho1": "-1"},
    ):
        with pytest.raises(ValueError):
            bench.spec_from_mapping(bad)


def test_run_configs_differ_by_run_but_not_by_call():
    spec = bench.CampaignSpec(["quad"], [2], ["strong"], seed=9)
    assert spec.bo_config("strong", 1) == spec.bo_config("strong", 1)
    assert spec.bo_config("strong", 0).seed != spec.bo_config("strong", 1).seed


def test_worker_count(monkeypatch):
    monkeypatch.setenv("CBO_THREADS", "3")
    assert bench.worker_count() == 3
    monkeypatch.setenv("CBO_THREADS", "zero")
    with pytest.raises(ValueError):
        bench.worker_count()


def test_campaign_marks_unsupported_and_writes_files(tmp_path):
    spec = bench.CampaignSpec(["prod"], [2], ["cei", "strong"], n_runs=2, max_evals=3)
    summary, traces = bench.run_campaign(spec, tmp_path, workers=1)
    assert summary.cell("prod", 2, "cei").unsupported
    assert len(traces) == 2 and all(t.method == "strong" for t in traces)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "prod_d2_strong_run0.csv", "prod_d2_strong_run1.csv", "summary.txt",
    ]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        again = bench.summarize_dir(tmp_path)
    assert again.cell("prod", 2, "strong").final_merits == summary.cell("prod", 2, "strong").final_merits
    with pytest.raises(ValueError):
        bench.summarize_dir(tmp_path / "missing")
