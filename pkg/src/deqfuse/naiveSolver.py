from typing import Optional, Tuple
from deqfuse.baseSolver import Array, BaseSolver, MapFn, Measure, SolverTrace
from deqfuse.config import SolverConfig
from deqfuse.logger import get_logger

logger = get_logger("deqfuse.naiveSolver")


class NaiveSolver:
    def __init__(self, base_solver: BaseSolver):
        self.solver = base_solver

    @property
    def config(self) -> SolverConfig:
        return self.solver.config

    def solve(
        self,
        fn: MapFn,
        s0: Array,
        measure: Optional[Measure] = None,
        record: bool = False,
        label: str = "naive",
    ) -> Tuple[Array, SolverTrace]:
        """
        Plain fixed-point iteration ``s <- fn(s)``.

        Args:
            fn: The map whose fixed point is sought.
            s0: Initial iterate.
            measure: Relative-change measure forwarded to the base loop.
            record: Keep the visited iterates in the trace.

        Returns:
            The final iterate and the trace.
        """
        result, trace = self.solver.iterate(
            fn,
            s0,
            propose=lambda s, fs: fs,
            measure=measure,
            record=record,
            label=label,
        )
        logger.debug(f"{label}: {trace.steps_taken} steps, converged={trace.converged}")
        return result, trace
