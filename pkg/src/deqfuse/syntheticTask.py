"""
Seeded two-modality classification task that needs cross-modal interaction.

Each sample carries a sign per modality. With the ``quadrant`` labeling the label is
``2 [s_1 > 0] + [s_2 > 0]``. The default ``parity`` labeling adds a shared sign ``t``
that both modalities carry along a second direction and uses
``2 [s_1 s_2 > 0] + [t > 0]``, so neither a single modality nor a linear model on the
concatenated features can recover the parity bit.
"""

from dataclasses import dataclass
from typing import List, Literal, Tuple

import numpy as np
import scipy.optimize
import scipy.special
from numpy.typing import NDArray

from deqfuse.errors import ConfigurationError
from deqfuse.layers import ModalityBundle
from deqfuse.logger import get_logger
from deqfuse.numCore import RngState, Tensor2

logger = get_logger("deqfuse.syntheticTask")

Labeling = Literal["parity", "quadrant"]
N_CLASSES = 4


@dataclass(frozen=True)
class SyntheticTaskSpec:
    width: int = 16
    sigma: float = 0.3
    n_train: int = 2000
    n_test: int = 1000
    n_modalities: int = 2
    classes: int = N_CLASSES
    labeling: Labeling = "parity"

    def validate(self) -> None:
        problems = []
        if self.n_modalities != 2:
            problems.append(
                f"the sign-product task has 2 modalities (got {self.n_modalities})"
            )
        if self.classes != N_CLASSES:
            problems.append(f"the sign-product task has 4 classes (got {self.classes})")
        if self.width < 2 * self.n_modalities:
            problems.append(
                f"width must be >= {2 * self.n_modalities} (got {self.width})"
            )
        if self.sigma < 0:
            problems.append(f"sigma must be >= 0 (got {self.sigma})")
        if self.n_train < 1 or self.n_test < 1:
            problems.append("both splits need at least one sample")
        if self.labeling not in ("parity", "quadrant"):
            problems.append(
                f"labeling must be parity or quadrant (got {self.labeling})"
            )
        if problems:
            message = f"SyntheticTaskSpec validation failed: {'; '.join(problems)}"
            logger.error(message)
            raise ConfigurationError(message)


@dataclass
class Split:
    x: ModalityBundle
    labels: NDArray[np.int64]

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def select(self, rows: NDArray[np.intp]) -> "Split":
        return Split(self.x.select(rows), self.labels[rows])


@dataclass
class SyntheticDataset:
    train: Split
    test: Split
    # signal directions v_i, then the shared-sign directions u_i
    directions: Tensor2
    spec: SyntheticTaskSpec


def _signs_from_labels(
    labels: NDArray[np.int64], labeling: Labeling, rng: RngState
) -> Tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    high = np.where(labels // 2 == 1, 1.0, -1.0)
    low = np.where(labels % 2 == 1, 1.0, -1.0)
    if labeling == "quadrant":
        return high, low, np.zeros_like(high)
    s1 = np.where(rng.generator.random(labels.shape[0]) < 0.5, -1.0, 1.0)
    return s1, s1 * high, low


def _draw_split(
    n: int, spec: SyntheticTaskSpec, directions: Tensor2, rng: RngState
) -> Split:
    labels = (np.arange(n) % N_CLASSES).astype(np.int64)
    labels = labels[rng.generator.permutation(n)]
    s1, s2, t = _signs_from_labels(labels, spec.labeling, rng)
    v1, v2, u1, u2 = directions
    features = [
        np.outer(s1, v1) + np.outer(t, u1),
        np.outer(s2, v2) + np.outer(t, u2),
    ]
    if spec.sigma > 0:
        features = [
            f + spec.sigma * rng.generator.standard_normal(f.shape) for f in features
        ]
    return Split(ModalityBundle([np.ascontiguousarray(f) for f in features]), labels)


def gen_signproduct(spec: SyntheticTaskSpec, rng: RngState) -> SyntheticDataset:
    """
    Draw balanced train and test splits of the sign-product task.

    Directions are orthonormal, seeded from ``rng``. Labels are balanced by
    construction and the two splits come from independent draws.
    """
    spec.validate()
    raw = rng.generator.standard_normal((spec.width, 2 * spec.n_modalities))
    q, _ = np.linalg.qr(raw)
    directions = np.ascontiguousarray(q.T)
    train = _draw_split(spec.n_train, spec, directions, rng)
    test = _draw_split(spec.n_test, spec, directions, rng)
    logger.info(
        f"Generated sign-product task ({spec.labeling}): d={spec.width}, "
        f"sigma={spec.sigma}, {spec.n_train} train / {spec.n_test} test"
    )
    return SyntheticDataset(train, test, directions, spec)


# ---------------------------------------------------------------------------
# Convex reference classifier
# ---------------------------------------------------------------------------


def concat_features(x: ModalityBundle) -> Tensor2:
    return np.concatenate(x.features, axis=1)


def product_features(x: ModalityBundle, directions: Tensor2) -> Tensor2:
    """Concatenation plus the projected sign product ``<x_1, v_1><x_2, v_2>``."""
    p1 = x.features[0] @ directions[0]
    p2 = x.features[1] @ directions[1]
    return np.column_stack([concat_features(x), p1 * p2])


def fit_logistic(
    features: Tensor2, labels: NDArray[np.int64], classes: int, l2: float = 1e-4
) -> Tuple[Tensor2, NDArray[np.float64]]:
    """Multinomial logistic regression by L-BFGS; returns ``(weight d x C, bias C)``."""
    n, d = features.shape
    onehot = np.eye(classes)[labels]

    def objective(theta: NDArray[np.float64]) -> Tuple[float, NDArray[np.float64]]:
        W = theta[: d * classes].reshape(d, classes)
        b = theta[d * classes :]
        log_p = scipy.special.log_softmax(features @ W + b, axis=1)
        loss = -float(np.sum(onehot * log_p)) / n + 0.5 * l2 * float(np.sum(W * W))
        d_logits = (np.exp(log_p) - onehot) / n
        grad_W = features.T @ d_logits + l2 * W
        return loss, np.concatenate([grad_W.ravel(), d_logits.sum(axis=0)])

    result = scipy.optimize.minimize(
        objective,
        np.zeros(d * classes + classes),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 1000},
    )
    theta = result.x
    return theta[: d * classes].reshape(d, classes), theta[d * classes :]


def linear_probe_accuracy(
    dataset: SyntheticDataset, with_product: bool = False
) -> float:
    """Test accuracy of logistic regression on concatenated (and product) features."""

    def featurize(split: Split) -> Tensor2:
        if with_product:
            return product_features(split.x, dataset.directions)
        return concat_features(split.x)

    W, b = fit_logistic(featurize(dataset.train), dataset.train.labels, N_CLASSES)
    predictions = np.argmax(featurize(dataset.test) @ W + b, axis=1)
    return float(np.mean(predictions == dataset.test.labels))


def class_means(split: Split) -> List[Tensor2]:
    """Per-class mean of each modality's features, ordered by class."""
    return [
        np.stack([f[split.labels == c].mean(axis=0) for f in split.x.features])
        for c in range(N_CLASSES)
    ]
