import pytest
import numpy as np
from typing import Any

from deqfuse.errors import NumericError, ShapeError
from deqfuse.numCore import (
    RngState,
    as_tensor,
    batch_rel_diff,
    frobenius,
    matmul,
    randn,
    rel_diff_norm,
    ridge_lstsq,
)


def test_matmul_shape_error_names_both_shapes(caplog: Any) -> None:
    """Test that a dimension mismatch raises ShapeError naming both operands."""
    caplog.set_level("ERROR", logger="deqfuse.numCore")
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))
    assert "cannot multiply" in caplog.text


def test_matmul_matches_numpy() -> None:
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(a, b), a @ b)


def test_as_tensor_promotes_vectors_and_rejects_rank3() -> None:
    assert as_tensor([1, 2, 3]).shape == (1, 3)
    assert as_tensor(5).shape == (1, 1)
    assert as_tensor([[1, 2]]).dtype == np.float64
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((2, 2, 2)))


def test_ridge_lstsq_matches_lstsq_for_full_rank() -> None:
    """lambda = 0 on a well-conditioned design returns the ordinary solution."""
    rng = RngState(3)
    A = randn(rng, 10, 4)
    b = randn(rng, 10, 1)
    expected, *_ = np.linalg.lstsq(A, b, rcond=None)
    np.testing.assert_allclose(ridge_lstsq(A, b, 0.0), expected, rtol=1e-10, atol=1e-12)


def test_ridge_lstsq_shrinks_towards_zero() -> None:
    rng = RngState(4)
    A = randn(rng, 8, 3)
    b = randn(rng, 8, 1)
    small = ridge_lstsq(A, b, 1e-6)
    large = ridge_lstsq(A, b, 1e6)
    assert frobenius(large) < frobenius(small)
    assert frobenius(large) < 1e-4


def test_ridge_lstsq_singular_without_ridge(caplog: Any) -> None:
    """Test that a singular system with lambda = 0 raises and advises lambda > 0."""
    caplog.set_level("ERROR", logger="deqfuse.numCore")
    A = np.ones((3, 2))
    b = np.ones((3, 1))
    with pytest.raises(NumericError, match="lambda > 0"):
        ridge_lstsq(A, b, 0.0)
    # the same system is fine with a ridge
    x = ridge_lstsq(A, b, 1e-3)
    assert np.all(np.isfinite(x))


def test_ridge_lstsq_row_mismatch() -> None:
    with pytest.raises(ShapeError):
        ridge_lstsq(np.ones((3, 2)), np.ones((4, 1)), 1e-4)


def test_rel_diff_norm_zero_denominator_guard() -> None:
    z_new = np.array([[3.0, 4.0]])
    assert rel_diff_norm(z_new, np.zeros((1, 2))) == pytest.approx(5.0)
    assert rel_diff_norm(z_new, z_new) == 0.0


def test_rel_diff_norm_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        rel_diff_norm(np.ones((1, 2)), np.ones((2, 1)))


def test_batch_rel_diff_is_mean_of_rows() -> None:
    old = np.array([[1.0, 0.0], [0.0, 2.0]])
    new = np.array([[2.0, 0.0], [0.0, 2.0]])
    # row 0 changes by 100%, row 1 not at all
    assert batch_rel_diff(new, old) == pytest.approx(0.5)


def test_rng_state_is_deterministic() -> None:
    a = randn(RngState(42), 3, 5)
    b = randn(RngState(42), 3, 5)
    c = randn(RngState(43), 3, 5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rng_state_spawn_and_bounds() -> None:
    base = RngState(7)
    np.testing.assert_array_equal(
        randn(base.spawn(1), 2, 2), randn(RngState(8), 2, 2)
    )
    with pytest.raises(ValueError):
        RngState(-1)
    with pytest.raises(ValueError):
        randn(base, 2, 2, scale=0.0)
