from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from deqfuse.config import SolverConfig
from deqfuse.errors import DivergenceError
from deqfuse.logger import get_logger
from deqfuse.numCore import batch_rel_diff, frobenius

logger = get_logger("deqfuse.baseSolver")

Array = NDArray[np.float64]
MapFn = Callable[[Array], Array]
# measure(f(s), s) -> relative change that one plain fixed-point step would make
Measure = Callable[[Array, Array], float]
# propose(s, f(s)) -> next iterate
Propose = Callable[[Array, Array], Array]


@dataclass
class SolverTrace:
    """Per-step convergence record of one solve."""

    rel_diffs: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    converged: bool = False
    method: str = ""
    iterates: Optional[List[Tuple[Array, Array]]] = None

    @property
    def steps_taken(self) -> int:
        return len(self.rel_diffs)

    @property
    def final_rel_diff(self) -> float:
        return self.rel_diffs[-1] if self.rel_diffs else float("nan")

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")

    def append(self, rel_diff: float, residual: float) -> None:
        self.rel_diffs.append(rel_diff)
        self.residuals.append(residual)

    def extend(self, other: "SolverTrace") -> "SolverTrace":
        """Concatenate two traces (e.g. the two phases of a block-triangular solve)."""
        iterates = None
        if self.iterates is not None or other.iterates is not None:
            iterates = (self.iterates or []) + (other.iterates or [])
        return SolverTrace(
            rel_diffs=self.rel_diffs + other.rel_diffs,
            residuals=self.residuals + other.residuals,
            converged=self.converged and other.converged,
            method=self.method or other.method,
            iterates=iterates,
        )

    def first_step_below(self, threshold: float) -> Optional[int]:
        """1-based step at which the relative difference first reaches ``threshold``."""
        for step, value in enumerate(self.rel_diffs, start=1):
            if value <= threshold:
                return step
        return None


class BaseSolver:
    def __init__(self, config: SolverConfig):
        """
        Initialize the shared iteration loop with a validated configuration.
        """
        config.validate()
        self.config = config

    def iterate(
        self,
        fn: MapFn,
        s0: Array,
        propose: Propose,
        measure: Optional[Measure] = None,
        record: bool = False,
        label: str = "",
    ) -> Tuple[Array, SolverTrace]:
        """
        Run a fixed-point loop ``s <- propose(s, fn(s))`` from ``s0``.

        Each step evaluates ``fn`` at the current iterate, records
        ``measure(fn(s), s)`` and the absolute residual ``||fn(s) - s||``, then stops
        once the measure is at most ``tol`` (unless early stopping is disabled).

        Args:
            fn: The map whose fixed point is sought.
            s0: Initial iterate.
            propose: Update rule producing the next iterate.
            measure: Relative-change measure; batch-mean relative difference by default.
            record: Keep every ``(s, fn(s))`` pair in the trace.
            label: Name used in log messages.

        Returns:
            The last map image ``fn(s)`` and the trace.

        Raises:
            DivergenceError: If the residual exceeds the divergence threshold or turns
                non-finite; the partial trace is attached.
        """
        cfg = self.config
        measure = measure or batch_rel_diff
        trace = SolverTrace(method=cfg.method, iterates=[] if record else None)
        s = s0
        fs = s0
        for step in range(1, cfg.max_steps + 1):
            fs = fn(s)
            residual = frobenius(fs - s)
            if not np.isfinite(residual) or residual > cfg.divergence_threshold:
                logger.error(
                    f"{label or cfg.method} diverged at step {step}: "
                    f"residual {residual:.3e}"
                )
                raise DivergenceError(
                    f"{label or cfg.method} solve diverged at step {step} "
                    f"(residual {residual:.3e})",
                    trace,
                )
            value = measure(fs, s)
            trace.append(value, residual)
            if trace.iterates is not None:
                trace.iterates.append((s.copy(), fs.copy()))
            logger.debug(f"{label or cfg.method} step {step}: rel_diff={value:.6e}")

            if cfg.early_stop and value <= cfg.tol:
                trace.converged = True
                logger.debug(f"{label or cfg.method} converged in {step} steps")
                return fs, trace
            if step < cfg.max_steps:
                s = propose(s, fs)

        trace.converged = trace.final_rel_diff <= cfg.tol
        if cfg.early_stop and not trace.converged:
            logger.warning(
                f"{label or cfg.method} did not reach tol {cfg.tol:.1e} in "
                f"{cfg.max_steps} steps (last rel_diff {trace.final_rel_diff:.3e})"
            )
        return fs, trace
