"""
Classification on top of the fused equilibrium feature.

The head is a single affine map ``logits = z_fuse @ W + b`` so that all cross-modal
work has to be done by the fusion layer; ablation variants switch parts of that layer
off.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, NoReturn, Optional, Tuple

import numpy as np
import scipy.special
from numpy.typing import NDArray

from deqfuse.baseSolver import SolverTrace
from deqfuse.config import FusionConfig, SolverConfig, TrainConfig
from deqfuse.equilibrium import EquilibriumState, JointMap, solve
from deqfuse.errors import ConfigurationError, ConvergenceError, TrainingAbortedError
from deqfuse.implicitGrad import backward, backward_unrolled, jacobian_reg_grad
from deqfuse.layers import (
    FusionLayout,
    FusionParams,
    ModalityBundle,
    Tensor2,
    injected_fusion,
    injected_fusion_vjp,
)
from deqfuse.logger import get_logger
from deqfuse.metrics import ClassificationMetrics, metrics
from deqfuse.numCore import RngState, batch_rel_diff, frobenius, randn
from deqfuse.optimizer import create_optimizer
from deqfuse.syntheticTask import N_CLASSES, Split, SyntheticDataset

logger = get_logger("deqfuse.training")

FUSION_PREFIX = "fusion."


@dataclass
class HeadParams:
    weight: Tensor2
    bias: NDArray[np.float64]

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.weight.shape[1] < 2:
            raise ConfigurationError(
                f"Head needs a d x C weight with C >= 2, got {self.weight.shape}"
            )
        if self.bias.shape != (self.weight.shape[1],):
            raise ConfigurationError(
                f"Head bias {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def classes(self) -> int:
        return int(self.weight.shape[1])

    @classmethod
    def initialize(cls, width: int, classes: int, rng: RngState) -> "HeadParams":
        weight = randn(rng, width, classes, 1.0 / np.sqrt(width))
        return cls(weight=weight, bias=np.zeros(classes))

    def __call__(self, z: Tensor2) -> Tensor2:
        return z @ self.weight + self.bias

    def copy(self) -> "HeadParams":
        return HeadParams(self.weight.copy(), self.bias.copy())


class AblationVariant(str, Enum):
    FULL = "full"
    WEIGHTED_SUM_ONLY = "weighted_sum_only"
    NO_DEQ = "no_deq"
    NO_FUSE = "no_fuse"
    NO_THETA = "no_theta"
    NO_GATE = "no_gate"

    @property
    def display_name(self) -> str:
        return {
            "full": "Full",
            "weighted_sum_only": "WeightedSumOnly",
            "no_deq": "NoDeq",
            "no_fuse": "NoFuse",
            "no_theta": "NoTheta",
            "no_gate": "NoGate",
        }[self.value]

    @property
    def layout(self) -> FusionLayout:
        if self is AblationVariant.NO_FUSE:
            return FusionLayout(fuse_block=False)
        if self is AblationVariant.NO_THETA:
            return FusionLayout(modality_blocks=False)
        if self is AblationVariant.NO_GATE:
            return FusionLayout(gate=False)
        return FusionLayout()

    @property
    def solves_equilibrium(self) -> bool:
        return self not in (AblationVariant.WEIGHTED_SUM_ONLY, AblationVariant.NO_DEQ)


# Full last, the order ablation tables are printed in.
ABLATION_ORDER = [
    AblationVariant.WEIGHTED_SUM_ONLY,
    AblationVariant.NO_DEQ,
    AblationVariant.NO_FUSE,
    AblationVariant.NO_THETA,
    AblationVariant.NO_GATE,
    AblationVariant.FULL,
]


def cross_entropy(logits: Tensor2, labels: NDArray[np.int64]) -> Tuple[float, Tensor2]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    log_p = scipy.special.log_softmax(logits, axis=1)
    n = labels.shape[0]
    loss = -float(np.mean(log_p[np.arange(n), labels]))
    d_logits = np.exp(log_p)
    d_logits[np.arange(n), labels] -= 1.0
    return loss, d_logits / n


def single_sweep(
    x: ModalityBundle,
    params: FusionParams,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
) -> EquilibriumState:
    """Apply every block and the fuse step once from the zero state."""
    jm = JointMap(x, params, layout, gate_uses_updated)
    zero = jm.zeros()
    state = jm(zero)
    trace = SolverTrace(method="single_sweep")
    trace.append(batch_rel_diff(state.pack(), zero.pack()), frobenius(state.pack()))
    return EquilibriumState(state, trace, layout, gate_uses_updated)


def fused_feature(
    x: ModalityBundle,
    params: FusionParams,
    variant: AblationVariant,
    solver_cfg: SolverConfig,
    gate_uses_updated: bool = True,
) -> Tuple[Tensor2, Optional[EquilibriumState]]:
    if variant is AblationVariant.WEIGHTED_SUM_ONLY:
        return injected_fusion(x, params.importance), None
    if variant is AblationVariant.NO_DEQ:
        eq = single_sweep(x, params, variant.layout, gate_uses_updated)
    else:
        eq = solve(x, params, solver_cfg, variant.layout, gate_uses_updated)
    return eq.z_fuse, eq


def forward_predict(
    x: ModalityBundle,
    params: FusionParams,
    head: HeadParams,
    variant: AblationVariant,
    solver_cfg: SolverConfig,
    gate_uses_updated: bool = True,
) -> Tuple[Tensor2, Optional[EquilibriumState]]:
    """Logits of the variant's pipeline and, when one is computed, its fused state."""
    z, eq = fused_feature(x, params, variant, solver_cfg, gate_uses_updated)
    return head(z), eq


def fusion_gradients(
    x: ModalityBundle,
    params: FusionParams,
    variant: AblationVariant,
    eq: Optional[EquilibriumState],
    dz: Tensor2,
    backward_cfg: SolverConfig,
    gate_uses_updated: bool = True,
) -> FusionParams:
    if variant is AblationVariant.WEIGHTED_SUM_ONLY:
        _, dw = injected_fusion_vjp(x, params.importance, dz)
        return params.zeros_like().with_arrays({"importance": dw})
    if variant is AblationVariant.NO_DEQ:
        unrolled = backward_unrolled(
            x, params, dz, 1, variant.layout, gate_uses_updated
        )
        return unrolled.params
    assert eq is not None
    return backward(eq, x, params, dz, backward_cfg).params


def _pack(params: FusionParams, head: HeadParams) -> Dict[str, NDArray[np.float64]]:
    named = {FUSION_PREFIX + k: v for k, v in params.named_arrays().items()}
    named["head.weight"] = head.weight
    named["head.bias"] = head.bias
    return named


def _unpack(
    named: Dict[str, NDArray[np.float64]], template: FusionParams
) -> Tuple[FusionParams, HeadParams]:
    fusion = {
        k[len(FUSION_PREFIX) :]: v
        for k, v in named.items()
        if k.startswith(FUSION_PREFIX)
    }
    head = HeadParams(named["head.weight"], named["head.bias"])
    return template.with_arrays(fusion), head


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_acc: float
    macro_f1: float
    weighted_f1: float
    # batches whose equilibrium or adjoint missed tol; they were not applied
    unconverged_steps: int = 0


@dataclass
class TrainResult:
    params: FusionParams
    head: HeadParams
    history: List[EpochRecord]
    initial_params: FusionParams
    initial_head: HeadParams
    variant: AblationVariant = AblationVariant.FULL

    @property
    def final(self) -> EpochRecord:
        return self.history[-1]

    @property
    def unconverged_steps(self) -> int:
        return sum(r.unconverged_steps for r in self.history)


def evaluate(
    split: Split,
    params: FusionParams,
    head: HeadParams,
    variant: AblationVariant,
    solver_cfg: SolverConfig,
    batch_size: int = 256,
    gate_uses_updated: bool = True,
) -> ClassificationMetrics:
    """Metrics of the variant on ``split``, solving ``batch_size`` rows at a time."""
    logits = []
    for start in range(0, len(split), batch_size):
        rows = np.arange(start, min(start + batch_size, len(split)))
        out, _ = forward_predict(
            split.x.select(rows), params, head, variant, solver_cfg, gate_uses_updated
        )
        logits.append(out)
    return metrics(np.concatenate(logits, axis=0), split.labels)


def _masked(split: Split, mask: Optional[Tuple[bool, ...]]) -> Split:
    if mask is None:
        return split
    return Split(split.x.masked(mask), split.labels)


def train(
    dataset: SyntheticDataset,
    cfg: TrainConfig,
    fusion: Optional[FusionConfig] = None,
    params: Optional[FusionParams] = None,
    head: Optional[HeadParams] = None,
) -> TrainResult:
    """
    Minibatch training of fusion parameters and head.

    Each step solves the forward equilibrium, takes the cross-entropy (plus
    ``jac_weight`` times the Jacobian penalty), backpropagates implicitly and applies
    one optimizer update. Test metrics are recorded after every epoch.

    Raises:
        TrainingAbortedError: The loss became non-finite; ``.snapshot`` holds the
            epoch, step, loss and parameter norms at that point.
    """
    cfg.validate()
    variant = AblationVariant(cfg.variant)
    fusion = fusion or FusionConfig(
        width=dataset.train.x.width, n_modalities=dataset.train.x.n_modalities
    )
    fusion.validate()
    rng = RngState(cfg.seed)
    if params is None:
        params = FusionParams.initialize(fusion, rng.spawn(1))
    if head is None:
        head = HeadParams.initialize(fusion.width, N_CLASSES, rng.spawn(2))
    shuffle_rng = rng.spawn(3)
    probe_rng = rng.spawn(4)
    initial_params, initial_head = params.copy(), head.copy()

    train_split = _masked(dataset.train, cfg.modality_mask)
    test_split = _masked(dataset.test, cfg.modality_mask)
    optimizer = create_optimizer(cfg, FUSION_PREFIX)
    use_updated = fusion.gate_uses_updated
    history: List[EpochRecord] = []

    logger.info(
        f"Training {variant.display_name}: {cfg.epochs} epochs, "
        f"batch {cfg.batch_size}, "
        f"{cfg.optimizer} lr={cfg.lr}, jac_weight={cfg.jac_weight}"
    )
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.generator.permutation(len(train_split))
        losses = []
        skipped = 0
        starts = range(0, len(train_split), cfg.batch_size)
        for step, start in enumerate(starts, start=1):
            batch = train_split.select(order[start : start + cfg.batch_size])
            z, eq = fused_feature(batch.x, params, variant, cfg.solver, use_updated)
            loss, d_logits = cross_entropy(head(z), batch.labels)
            try:
                grads = fusion_gradients(
                    batch.x,
                    params,
                    variant,
                    eq,
                    d_logits @ head.weight.T,
                    cfg.backward_solver,
                    use_updated,
                )
            except ConvergenceError as e:
                if not np.isfinite(loss):
                    _abort(epoch, step, loss, params, head)
                skipped += 1
                logger.warning(f"Skipping epoch {epoch}, step {step}: {e}")
                continue

            if cfg.jac_weight > 0 and eq is not None and variant.solves_equilibrium:
                penalty, jac_grads = jacobian_reg_grad(
                    params, batch.x, eq, probe_rng, cfg.jac_probes
                )
                loss += cfg.jac_weight * penalty
                named = grads.named_arrays()
                jac_named = jac_grads.named_arrays()
                grads = grads.with_arrays(
                    {k: named[k] + cfg.jac_weight * jac_named[k] for k in named}
                )

            if not np.isfinite(loss):
                _abort(epoch, step, loss, params, head)
            losses.append(loss)

            named_grads = {
                FUSION_PREFIX + k: v for k, v in grads.named_arrays().items()
            }
            named_grads["head.weight"] = z.T @ d_logits
            named_grads["head.bias"] = d_logits.sum(axis=0)
            stepped = optimizer.step(_pack(params, head), named_grads)
            params, head = _unpack(stepped, params)

        scores = evaluate(
            test_split, params, head, variant, cfg.solver, cfg.batch_size, use_updated
        )
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            test_acc=scores.accuracy,
            macro_f1=scores.macro_f1,
            weighted_f1=scores.weighted_f1,
            unconverged_steps=skipped,
        )
        history.append(record)
        logger.info(
            f"epoch {epoch}: loss {record.train_loss:.4f}, "
            f"test acc {record.test_acc:.4f}, "
            f"macro-F1 {record.macro_f1:.4f}"
        )
        if skipped:
            logger.warning(f"epoch {epoch}: {skipped} unconverged steps were skipped")

    return TrainResult(params, head, history, initial_params, initial_head, variant)


def _snapshot(
    epoch: int, step: int, loss: float, params: FusionParams, head: HeadParams
) -> Dict[str, Any]:
    norms = {k: frobenius(v) for k, v in _pack(params, head).items()}
    return {"epoch": epoch, "step": step, "loss": loss, "param_norms": norms}


def _abort(
    epoch: int, step: int, loss: float, params: FusionParams, head: HeadParams
) -> NoReturn:
    snapshot = _snapshot(epoch, step, loss, params, head)
    logger.error(f"Non-finite loss at epoch {epoch}, step {step}: {snapshot}")
    message = f"Non-finite loss at epoch {epoch}, step {step}"
    raise TrainingAbortedError(message, snapshot)
