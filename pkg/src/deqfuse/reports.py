"""CSV exports and aligned text tables for the command-line tools."""

import csv
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from deqfuse.baseSolver import SolverTrace
from deqfuse.implicitGrad import GradcheckReport
from deqfuse.logger import get_logger
from deqfuse.training import EpochRecord

logger = get_logger("deqfuse.reports")

SUMMARY_STEPS = (1, 10, 20, 40, 100)


def fmt(value: float) -> str:
    return "%.6e" % value


def _write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    logger.info(f"Wrote {path}")


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned first column, right-aligned numbers, two spaces between columns."""
    widths = [len(h) for h in header]
    for row in rows:
        widths = [max(w, len(cell)) for w, cell in zip(widths, row)]

    def line(cells: Sequence[str]) -> str:
        parts = [cells[0].ljust(widths[0])]
        parts += [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), rule, *(line(r) for r in rows)])


# ---------------------------------------------------------------------------
# Convergence traces
# ---------------------------------------------------------------------------


@dataclass
class TraceStatistics:
    mean: List[float]
    ci_low: List[float]
    ci_high: List[float]
    runs: int

    @classmethod
    def from_traces(cls, traces: Sequence[SolverTrace]) -> "TraceStatistics":
        """Per-step mean and 95% normal confidence band over equally long traces."""
        steps = min(t.steps_taken for t in traces)
        values = np.array([t.rel_diffs[:steps] for t in traces])
        mean = values.mean(axis=0)
        if len(traces) > 1:
            half = 1.96 * values.std(axis=0, ddof=1) / np.sqrt(len(traces))
        else:
            half = np.zeros(steps)
        return cls(
            mean.tolist(), (mean - half).tolist(), (mean + half).tolist(), len(traces)
        )


def write_trace_csv(path: str, stats: TraceStatistics) -> None:
    if stats.runs > 1:
        rows = [
            [str(k), fmt(m), fmt(lo), fmt(hi)]
            for k, (m, lo, hi) in enumerate(
                zip(stats.mean, stats.ci_low, stats.ci_high), 1
            )
        ]
        _write_csv(path, ["step", "rel_diff", "ci_low", "ci_high"], rows)
    else:
        rows = [[str(k), fmt(m)] for k, m in enumerate(stats.mean, 1)]
        _write_csv(path, ["step", "rel_diff"], rows)


def convergence_summary(
    stats: TraceStatistics, steps: Sequence[int] = SUMMARY_STEPS
) -> str:
    """Relative difference norm at the summary steps that the trace reaches."""
    shown = [s for s in steps if s <= len(stats.mean)]
    header = ["steps", *(str(s) for s in shown)]
    row = ["rel_diff", *(fmt(stats.mean[s - 1]) for s in shown)]
    return render_table(header, [row])


# ---------------------------------------------------------------------------
# Training and ablation
# ---------------------------------------------------------------------------

METRICS_HEADER = ["epoch", "train_loss", "test_acc", "macro_f1", "weighted_f1"]


def write_metrics_csv(path: str, history: Sequence[EpochRecord]) -> None:
    rows = [
        [
            str(r.epoch),
            fmt(r.train_loss),
            fmt(r.test_acc),
            fmt(r.macro_f1),
            fmt(r.weighted_f1),
        ]
        for r in history
    ]
    _write_csv(path, METRICS_HEADER, rows)


@dataclass
class AblationRow:
    variant: str
    accuracy: List[float]
    macro_f1: List[float]
    weighted_f1: List[float]
    failed: int = 0

    @staticmethod
    def _mean_std(values: List[float]) -> Tuple[float, float]:
        if not values:
            return float("nan"), float("nan")
        arr = np.array(values)
        return float(arr.mean()), float(arr.std())

    def cells(self) -> List[str]:
        out = [self.variant]
        for values in (self.accuracy, self.macro_f1, self.weighted_f1):
            mean, std = self._mean_std(values)
            out += [fmt(mean), fmt(std)]
        out.append(str(self.failed))
        return out


ABLATION_HEADER = [
    "variant", "acc_mean", "acc_std", "macro_f1_mean", "macro_f1_std",
    "weighted_f1_mean", "weighted_f1_std", "failed",
]


def write_ablation_csv(path: str, rows: Sequence[AblationRow]) -> None:
    _write_csv(path, ABLATION_HEADER, [r.cells() for r in rows])


def ablation_table(rows: Sequence[AblationRow]) -> str:
    return render_table(ABLATION_HEADER, [r.cells() for r in rows])


# ---------------------------------------------------------------------------
# Solver benchmark
# ---------------------------------------------------------------------------


def censored(steps: Optional[int], limit: int) -> str:
    return str(steps) if steps is not None else f">{limit}"


@dataclass
class SolveBenchRow:
    seed: int
    naive_steps: Optional[int]
    anderson_steps: Optional[int]

    def cells(self, limit: int) -> List[str]:
        return [
            str(self.seed),
            censored(self.naive_steps, limit),
            censored(self.anderson_steps, limit),
        ]


SOLVEBENCH_HEADER = ["seed", "naive_steps", "anderson_steps"]


def write_solvebench_csv(path: str, rows: Sequence[SolveBenchRow], limit: int) -> None:
    _write_csv(path, SOLVEBENCH_HEADER, [r.cells(limit) for r in rows])


def solvebench_table(rows: Sequence[SolveBenchRow], limit: int) -> str:
    return render_table(SOLVEBENCH_HEADER, [r.cells(limit) for r in rows])


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def gradcheck_table(reports: Sequence[GradcheckReport], tol: float) -> str:
    """Worst error per named array over all seeds, with a pass/fail column."""
    names = [e.name for e in reports[0].entries]
    rows = []
    for i, name in enumerate(names):
        fd = max(r.entries[i].fd_error for r in reports)
        unrolled = max(r.entries[i].unrolled_error for r in reports)
        status = "pass" if fd < tol and unrolled < tol else "FAIL"
        rows.append([name, fmt(fd), fmt(unrolled), status])
    return render_table(["array", "fd_rel_err", "unrolled_rel_err", "status"], rows)
