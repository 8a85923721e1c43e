from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
from numpy.typing import NDArray

from deqfuse.config import TrainConfig
from deqfuse.errors import ConfigurationError
from deqfuse.logger import get_logger

logger = get_logger("deqfuse.optimizer")

Named = Dict[str, NDArray[np.float64]]


@dataclass
class Optimizer:
    """
    First-order update over named arrays.

    ``group_lrs`` maps a name prefix (e.g. ``"fusion."``) to its own learning rate;
    arrays matching no prefix use ``lr``.
    """

    lr: float
    group_lrs: Dict[str, float] = field(default_factory=dict)
    steps: int = 0

    def lr_for(self, name: str) -> float:
        for prefix, lr in self.group_lrs.items():
            if name.startswith(prefix):
                return lr
        return self.lr

    def step(
        self,
        params: Mapping[str, NDArray[np.float64]],
        grads: Mapping[str, NDArray[np.float64]],
    ) -> Named:
        missing = set(params) - set(grads)
        if missing:
            raise ConfigurationError(f"No gradient for parameters: {sorted(missing)}")
        self.steps += 1
        updated = {}
        for name, value in params.items():
            lr = self.lr_for(name)
            if lr == 0.0:
                updated[name] = value
                continue
            updated[name] = value - lr * self.direction(name, grads[name])
        return updated

    def direction(self, name: str, grad: NDArray[np.float64]) -> NDArray[np.float64]:
        raise NotImplementedError


@dataclass
class SGD(Optimizer):
    def direction(self, name: str, grad: NDArray[np.float64]) -> NDArray[np.float64]:
        return grad


@dataclass
class Adam(Optimizer):
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Named = field(default_factory=dict)
    v: Named = field(default_factory=dict)

    def direction(self, name: str, grad: NDArray[np.float64]) -> NDArray[np.float64]:
        zero = np.zeros_like(grad)
        m = self.beta1 * self.m.get(name, zero) + (1 - self.beta1) * grad
        v = self.beta2 * self.v.get(name, zero) + (1 - self.beta2) * grad * grad
        self.m[name], self.v[name] = m, v
        m_hat = m / (1 - self.beta1**self.steps)
        v_hat = v / (1 - self.beta2**self.steps)
        return m_hat / (np.sqrt(v_hat) + self.eps)


def create_optimizer(cfg: TrainConfig, fusion_prefix: str = "fusion.") -> Optimizer:
    group_lrs: Dict[str, float] = {}
    if cfg.fusion_lr is not None:
        group_lrs[fusion_prefix] = cfg.fusion_lr
    optimizer: Optional[Optimizer] = None
    if cfg.optimizer == "sgd":
        optimizer = SGD(lr=cfg.lr, group_lrs=group_lrs)
    elif cfg.optimizer == "adam":
        optimizer = Adam(
            lr=cfg.lr,
            group_lrs=group_lrs,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.adam_eps,
        )
    if optimizer is None:
        logger.error(f"Unknown optimizer: {cfg.optimizer}")
        raise ConfigurationError(f"Unknown optimizer: {cfg.optimizer}")
    logger.debug(
        f"Created {type(optimizer).__name__} with lr={cfg.lr}, groups={group_lrs}"
    )
    return optimizer
