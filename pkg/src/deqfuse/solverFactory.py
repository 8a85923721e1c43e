from threading import Lock
from typing import Dict, Union
from deqfuse.andersonSolver import AndersonSolver
from deqfuse.baseSolver import BaseSolver
from deqfuse.config import SolverConfig
from deqfuse.logger import get_logger
from deqfuse.naiveSolver import NaiveSolver

logger = get_logger("deqfuse.solverFactory")

Solver = Union[NaiveSolver, AndersonSolver]


class SolverFactory:
    _base_solvers: Dict[SolverConfig, BaseSolver] = {}
    _lock = Lock()

    @classmethod
    def get_base_solver(cls, config: SolverConfig) -> BaseSolver:
        """
        Get or create the shared BaseSolver for this configuration.

        Base solvers keep no per-solve state, so one instance per configuration is
        shared by every thread.
        """
        base = cls._base_solvers.get(config)
        if base is None:
            with cls._lock:
                base = cls._base_solvers.get(config)
                if base is None:  # Double-checked locking
                    try:
                        base = BaseSolver(config)
                    except Exception as e:
                        logger.error("Failed to create BaseSolver: %s", str(e))
                        raise
                    cls._base_solvers[config] = base
        return base

    @classmethod
    def create_naive_solver(cls, config: SolverConfig) -> NaiveSolver:
        return NaiveSolver(cls.get_base_solver(config))

    @classmethod
    def create_anderson_solver(cls, config: SolverConfig) -> AndersonSolver:
        return AndersonSolver(cls.get_base_solver(config))

    @classmethod
    def create_solver(cls, config: SolverConfig) -> Solver:
        """Create the solver named by ``config.method``."""
        if config.method == "naive":
            return cls.create_naive_solver(config)
        return cls.create_anderson_solver(config)

    @classmethod
    def reset(cls) -> None:
        """Drop every cached BaseSolver."""
        with cls._lock:
            cls._base_solvers.clear()
