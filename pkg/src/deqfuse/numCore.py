"""
Dense float64 numerics shared by every other module.

Tensors are plain two-dimensional ``numpy`` arrays of dtype float64 (batched features
are ``batch x d``). Randomness goes through :class:`RngState`, a thin wrapper around a
``numpy.random.Generator`` driven by the PCG64 bit generator, so an identical seed gives
an identical stream on every platform.
"""

import warnings
from dataclasses import dataclass, field
from typing import Any, Tuple

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from deqfuse.errors import NumericError, ShapeError
from deqfuse.logger import get_logger

logger = get_logger("deqfuse.numCore")

Tensor2 = NDArray[np.float64]


def as_tensor(data: Any) -> Tensor2:
    """Convert array-like data to a C-contiguous float64 matrix."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"Expected a rank-2 tensor, got shape {arr.shape}")
    return arr


def require_same_shape(a: NDArray[Any], b: NDArray[Any], what: str) -> None:
    """Raise ShapeError unless ``a`` and ``b`` have identical shapes."""
    if a.shape != b.shape:
        logger.error(f"{what}: shape mismatch {a.shape} vs {b.shape}")
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    """
    Matrix product of two rank-2 tensors.

    Raises:
        ShapeError: If ``a.cols != b.rows``.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        logger.error(f"matmul: cannot multiply {a.shape} by {b.shape}")
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return np.ascontiguousarray(a @ b)


def ridge_lstsq(A: Tensor2, b: Tensor2, lam: float) -> Tensor2:
    """
    Solve ``min ||Ax - b||^2 + lam ||x||^2`` through the normal equations.

    Args:
        A: Design matrix (n x k).
        b: Right-hand side (n x c).
        lam: Non-negative ridge weight.

    Returns:
        The k x c minimiser.

    Raises:
        ShapeError: If the row counts differ.
        NumericError: If ``lam == 0`` and ``A^T A`` is singular.
    """
    if A.ndim != 2 or b.ndim != 2 or A.shape[0] != b.shape[0]:
        logger.error(f"ridge_lstsq: incompatible shapes {A.shape} and {b.shape}")
        raise ShapeError(f"ridge_lstsq: incompatible shapes {A.shape} and {b.shape}")
    if lam < 0:
        raise NumericError(f"ridge_lstsq: lambda must be >= 0, got {lam}")

    gram = A.T @ A
    if lam > 0:
        gram = gram + lam * np.eye(gram.shape[0])
    rhs = A.T @ b

    with warnings.catch_warnings():
        if lam == 0:
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        else:
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        try:
            solution = scipy.linalg.solve(gram, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as e:
            logger.error(f"ridge_lstsq: singular normal equations ({e})")
            raise NumericError(
                "ridge_lstsq: normal equations are singular; use lambda > 0"
            ) from e
    return np.ascontiguousarray(solution, dtype=np.float64)


def frobenius(a: NDArray[np.float64]) -> float:
    return float(np.sqrt(np.sum(a * a)))


def rel_diff_norm(z_new: NDArray[np.float64], z_old: NDArray[np.float64]) -> float:
    """
    ``||z_new - z_old|| / ||z_old||`` in the Frobenius norm.

    When ``z_old`` is all zeros the denominator is dropped and ``||z_new||`` is
    returned; iterations start from the zero state so the first step always hits this.
    """
    require_same_shape(z_new, z_old, "rel_diff_norm")
    denom = frobenius(z_old)
    if denom == 0.0:
        return frobenius(z_new)
    return frobenius(z_new - z_old) / denom


def batch_rel_diff(z_new: NDArray[np.float64], z_old: NDArray[np.float64]) -> float:
    """Mean over rows of the per-row relative difference norm."""
    require_same_shape(z_new, z_old, "batch_rel_diff")
    rows = z_new.reshape(z_new.shape[0], -1)
    olds = z_old.reshape(z_old.shape[0], -1)
    diffs = np.sqrt(np.sum((rows - olds) ** 2, axis=1))
    denoms = np.sqrt(np.sum(olds * olds, axis=1))
    news = np.sqrt(np.sum(rows * rows, axis=1))
    safe = np.where(denoms == 0.0, 1.0, denoms)
    per_row = np.where(denoms == 0.0, news, diffs / safe)
    return float(np.mean(per_row))


@dataclass
class RngState:
    """Seeded PCG64 stream; pass it explicitly to anything that draws."""

    seed: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, offset: int) -> "RngState":
        """Independent stream for a sub-run, derived from the base seed."""
        return RngState((self.seed + offset) % 2**64)


def randn(rng: RngState, rows: int, cols: int, scale: float = 1.0) -> Tensor2:
    """I.i.d. Gaussian entries with standard deviation ``scale``; advances ``rng``."""
    if scale <= 0:
        raise ValueError(f"randn: scale must be > 0, got {scale}")
    return np.ascontiguousarray(
        rng.generator.standard_normal((rows, cols)) * scale, dtype=np.float64
    )


def rademacher(rng: RngState, shape: Tuple[int, ...]) -> NDArray[np.float64]:
    """Independent +-1 entries with equal probability; advances ``rng``."""
    return rng.generator.choice(np.array([-1.0, 1.0]), size=shape)
