import numpy as np
from typing import Any

from deqfuse.baseSolver import SolverTrace
from deqfuse.implicitGrad import GradcheckEntry, GradcheckReport
from deqfuse.reports import (
    AblationRow,
    SolveBenchRow,
    TraceStatistics,
    ablation_table,
    censored,
    convergence_summary,
    fmt,
    gradcheck_table,
    render_table,
    solvebench_table,
    write_ablation_csv,
    write_metrics_csv,
    write_solvebench_csv,
    write_trace_csv,
)
from deqfuse.training import EpochRecord


def test_fmt_uses_six_digit_scientific() -> None:
    assert fmt(0.5) == "5.000000e-01"
    assert fmt(1234.5678) == "1.234568e+03"


def test_render_table_alignment() -> None:
    table = render_table(["name", "value"], [["a", "1"], ["longer", "10"]])
    lines = table.splitlines()
    assert lines[0] == "name    value"
    assert lines[1] == "------  -----"
    assert lines[2] == "a           1"
    assert lines[3] == "longer     10"


def test_trace_statistics_single_run() -> None:
    stats = TraceStatistics.from_traces([SolverTrace(rel_diffs=[1.0, 0.5, 0.25])])
    assert stats.mean == [1.0, 0.5, 0.25]
    assert stats.ci_low == stats.mean == stats.ci_high


def test_trace_statistics_confidence_band() -> None:
    traces = [SolverTrace(rel_diffs=[1.0, 0.2]), SolverTrace(rel_diffs=[3.0, 0.4, 0.1])]
    stats = TraceStatistics.from_traces(traces)
    # truncated to the shortest trace
    assert len(stats.mean) == 2
    assert stats.mean[0] == 2.0
    half = 1.96 * np.std([1.0, 3.0], ddof=1) / np.sqrt(2)
    assert np.isclose(stats.ci_high[0] - stats.mean[0], half)
    assert np.isclose(stats.mean[0] - stats.ci_low[0], half)


def test_write_trace_csv(tmp_path: Any) -> None:
    single = tmp_path / "single.csv"
    stats = TraceStatistics.from_traces([SolverTrace(rel_diffs=[1.0, 0.5])])
    write_trace_csv(str(single), stats)
    assert single.read_text() == "step,rel_diff\n1,1.000000e+00\n2,5.000000e-01\n"

    multi = tmp_path / "multi.csv"
    traces = [SolverTrace(rel_diffs=[1.0]), SolverTrace(rel_diffs=[1.0])]
    write_trace_csv(str(multi), TraceStatistics.from_traces(traces))
    assert multi.read_text().splitlines() == [
        "step,rel_diff,ci_low,ci_high",
        "1,1.000000e+00,1.000000e+00,1.000000e+00",
    ]


def test_convergence_summary_only_reached_steps() -> None:
    trace = SolverTrace(rel_diffs=[0.1**k for k in range(15)])
    stats = TraceStatistics.from_traces([trace])
    summary = convergence_summary(stats)
    header = summary.splitlines()[0].split()
    assert header == ["steps", "1", "10"]
    assert "1.000000e-09" in summary


def test_write_metrics_csv(tmp_path: Any) -> None:
    path = tmp_path / "metrics.csv"
    write_metrics_csv(str(path), [EpochRecord(1, 1.25, 0.5, 0.25, 0.125)])
    assert path.read_text() == (
        "epoch,train_loss,test_acc,macro_f1,weighted_f1\n"
        "1,1.250000e+00,5.000000e-01,2.500000e-01,1.250000e-01\n"
    )


def test_ablation_rows(tmp_path: Any) -> None:
    rows = [
        AblationRow("NoGate", [0.5, 0.7], [0.4, 0.6], [0.5, 0.5]),
        AblationRow("Full", [], [], [], failed=2),
    ]
    cells = rows[0].cells()
    assert cells[:3] == ["NoGate", fmt(0.6), fmt(0.1)]
    assert cells[-1] == "0"
    assert rows[1].cells()[1] == "nan"
    path = tmp_path / "ablation.csv"
    write_ablation_csv(str(path), rows)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("variant,acc_mean,acc_std")
    assert lines[2].startswith("Full,nan,nan") and lines[2].endswith(",2")
    assert ablation_table(rows).splitlines()[-1].startswith("Full")


def test_solvebench_censoring(tmp_path: Any) -> None:
    assert censored(12, 1000) == "12"
    assert censored(None, 1000) == ">1000"
    rows = [SolveBenchRow(0, 40, 9), SolveBenchRow(1, None, 15)]
    path = tmp_path / "bench.csv"
    write_solvebench_csv(str(path), rows, 1000)
    assert path.read_text() == "seed,naive_steps,anderson_steps\n0,40,9\n1,>1000,15\n"
    assert ">1000" in solvebench_table(rows, 1000)


def test_gradcheck_table_reports_worst_seed() -> None:
    reports = [
        GradcheckReport(
            0,
            [
                GradcheckEntry("fuse.theta", 1e-6, 2e-6),
                GradcheckEntry("x.0", 1e-7, 1e-7),
            ],
        ),
        GradcheckReport(
            1,
            [
                GradcheckEntry("fuse.theta", 5e-3, 1e-6),
                GradcheckEntry("x.0", 2e-7, 3e-7),
            ],
        ),
    ]
    lines = gradcheck_table(reports, 1e-3).splitlines()
    assert lines[2].split() == ["fuse.theta", fmt(5e-3), fmt(2e-6), "FAIL"]
    assert lines[3].split() == ["x.0", fmt(2e-7), fmt(3e-7), "pass"]
