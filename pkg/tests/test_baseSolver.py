import logging
import pytest
import numpy as np
from typing import Any

from deqfuse.baseSolver import BaseSolver, SolverTrace
from deqfuse.config import SolverConfig
from deqfuse.errors import ConfigurationError, DivergenceError
from deqfuse.naiveSolver import NaiveSolver
from deqfuse.numCore import batch_rel_diff


def halving_map(z: np.ndarray) -> np.ndarray:
    """Scalar probe f(z) = 0.5 z + 1 with fixed point 2."""
    return 0.5 * z + 1.0


def naive(**overrides: Any) -> NaiveSolver:
    return NaiveSolver(BaseSolver(SolverConfig(method="naive", **overrides)))


def test_invalid_config_is_rejected(caplog: Any) -> None:
    caplog.set_level(logging.DEBUG, logger="deqfuse.config")
    with pytest.raises(ConfigurationError, match="beta must be in"):
        BaseSolver(SolverConfig(beta=0.0))
    assert "SolverConfig validation failed" in caplog.text


def test_scalar_probe_converges_geometrically() -> None:
    """Error halves per step, so |z - 2| < 1e-6 is reached within 21 steps from 0."""
    z, trace = naive(tol=5e-7, max_steps=100).solve(halving_map, np.zeros((1, 1)))
    assert trace.converged
    assert trace.steps_taken <= 21
    assert abs(z[0, 0] - 2.0) < 1e-6


def test_first_step_from_zero_uses_guarded_norm() -> None:
    _, trace = naive(max_steps=1, early_stop=False).solve(halving_map, np.zeros((1, 1)))
    assert trace.rel_diffs == [1.0]
    assert trace.residuals == [1.0]


def test_constant_map_converges_in_two_steps() -> None:
    const = np.full((2, 3), 0.7)
    z, trace = naive().solve(lambda s: const, np.zeros((2, 3)))
    assert trace.steps_taken <= 2
    np.testing.assert_array_equal(z, const)


def test_trace_is_faithful_to_recorded_iterates() -> None:
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4)) * 0.2
    b = rng.standard_normal((2, 4))
    _, trace = naive(tol=1e-8).solve(
        lambda s: s @ A.T + b, np.zeros((2, 4)), record=True
    )
    assert trace.iterates is not None
    assert len(trace.iterates) == trace.steps_taken
    for k, (s, fs) in enumerate(trace.iterates):
        assert trace.rel_diffs[k] == batch_rel_diff(fs, s)
        if k + 1 < len(trace.iterates):
            np.testing.assert_array_equal(trace.iterates[k + 1][0], fs)


def test_early_stop_disabled_runs_every_step() -> None:
    _, trace = naive(tol=1e-3, max_steps=40, early_stop=False).solve(
        halving_map, np.zeros((1, 1))
    )
    assert trace.steps_taken == 40
    assert trace.converged


def test_warns_when_tolerance_not_reached(caplog: Any) -> None:
    caplog.set_level(logging.WARNING, logger="deqfuse.baseSolver")
    _, trace = naive(tol=1e-12, max_steps=5).solve(halving_map, np.zeros((1, 1)))
    assert not trace.converged
    assert trace.steps_taken == 5
    assert "did not reach tol" in caplog.text


def test_divergence_carries_partial_trace(caplog: Any) -> None:
    caplog.set_level(logging.ERROR, logger="deqfuse.baseSolver")
    with pytest.raises(DivergenceError) as excinfo:
        naive(max_steps=200).solve(lambda z: 3.0 * z + 1.0, np.zeros((1, 1)))
    trace = excinfo.value.trace
    assert trace is not None
    assert 0 < trace.steps_taken < 200
    assert all(r <= 1e6 for r in trace.residuals)
    assert "diverged" in caplog.text


def test_non_finite_map_value_is_divergence() -> None:
    with pytest.raises(DivergenceError):
        naive().solve(lambda z: z + np.nan, np.zeros((1, 1)))


def test_trace_helpers() -> None:
    first = SolverTrace(
        rel_diffs=[1.0, 0.1], residuals=[2.0, 0.2], converged=True, method="naive"
    )
    second = SolverTrace(rel_diffs=[0.5, 1e-5], residuals=[1.0, 1e-5], converged=True)
    joined = first.extend(second)
    assert joined.steps_taken == 4
    assert joined.converged
    assert joined.method == "naive"
    assert joined.final_residual == 1e-5
    assert joined.first_step_below(0.2) == 2
    assert joined.first_step_below(1e-9) is None
    assert np.isnan(SolverTrace().final_rel_diff)
