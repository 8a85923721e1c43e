from collections import deque
from typing import Deque, Optional, Tuple

import numpy as np

from deqfuse.baseSolver import Array, BaseSolver, MapFn, Measure, SolverTrace
from deqfuse.config import SolverConfig
from deqfuse.logger import get_logger
from deqfuse.numCore import ridge_lstsq

logger = get_logger("deqfuse.andersonSolver")


class AndersonMixer:
    """
    Rolling history of ``(s_k, f(s_k))`` pairs and the Anderson(m) update.

    ``memory`` counts stored residuals, so at most ``memory - 1`` difference columns
    enter the least-squares problem; ``memory == 1`` is damped plain iteration.
    """

    def __init__(self, memory: int, beta: float, ridge: float):
        self.memory = memory
        self.beta = beta
        self.ridge = ridge
        self.states: Deque[Array] = deque(maxlen=memory)
        self.images: Deque[Array] = deque(maxlen=memory)

    def __len__(self) -> int:
        return len(self.states)

    def reset(self) -> None:
        self.states.clear()
        self.images.clear()

    def step(self, s: Array, fs: Array) -> Array:
        """Record the newest pair and return the next iterate, shaped like ``s``."""
        self.states.append(s.reshape(-1))
        self.images.append(fs.reshape(-1))

        if len(self.states) == 1:
            if self.beta == 1.0:
                return fs
            return (1.0 - self.beta) * s + self.beta * fs

        X = np.stack(self.states, axis=1)
        G = np.stack(self.images, axis=1)
        R = G - X
        # Sum-to-one constraint eliminated through consecutive differences.
        dX = np.diff(X, axis=1)
        dG = np.diff(G, axis=1)
        dR = np.diff(R, axis=1)
        gamma = ridge_lstsq(dR, R[:, -1:], self.ridge)

        g_bar = G[:, -1:] - dG @ gamma
        if self.beta == 1.0:
            mixed = g_bar
        else:
            x_bar = X[:, -1:] - dX @ gamma
            mixed = (1.0 - self.beta) * x_bar + self.beta * g_bar
        return np.ascontiguousarray(mixed.reshape(s.shape))


class AndersonSolver:
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
        label: str = "anderson",
    ) -> Tuple[Array, SolverTrace]:
        """
        Anderson-accelerated fixed-point iteration.

        The next iterate combines the last ``m`` pairs,
        ``(1 - beta) sum_k gamma_k s_k + beta sum_k gamma_k f(s_k)``, with ``gamma``
        minimising ``||sum_k gamma_k (f(s_k) - s_k)||`` under ``sum_k gamma_k = 1``
        and a ridge term for stability.

        Args:
            fn: The map whose fixed point is sought.
            s0: Initial iterate.
            measure: Relative-change measure forwarded to the base loop.
            record: Keep the visited iterates in the trace.

        Returns:
            The final map image and the trace.
        """
        cfg = self.config
        mixer = AndersonMixer(cfg.memory, cfg.beta, cfg.ridge)
        result, trace = self.solver.iterate(
            fn, s0, propose=mixer.step, measure=measure, record=record, label=label
        )
        logger.debug(
            f"{label}: {trace.steps_taken} steps (m={cfg.memory}, beta={cfg.beta}), "
            f"converged={trace.converged}"
        )
        return result, trace
