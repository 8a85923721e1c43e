from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple
import json
import os
from dotenv import load_dotenv
from dataclasses_json import DataClassJsonMixin, Undefined, config
from dataclasses_json.undefined import UndefinedParameterError
from deqfuse.errors import ConfigurationError
from deqfuse.logger import get_logger

logger = get_logger("deqfuse.config")

SOLVER_METHODS = ("naive", "anderson")
TRACE_TARGETS = ("joint", "fuse")
OPTIMIZERS = ("sgd", "adam")
VARIANT_NAMES = (
    "full",
    "weighted_sum_only",
    "no_deq",
    "no_fuse",
    "no_theta",
    "no_gate",
)


def _fail(kind: str, problems: List[str]) -> None:
    if problems:
        message = f"{kind} validation failed: {'; '.join(problems)}"
        logger.error(message)
        raise ConfigurationError(message)
    logger.debug(f"{kind} validated successfully")


@dataclass(frozen=True)
class FusionConfig:
    """Architecture of one fusion instance."""

    width: int
    n_modalities: int
    groups: int = 1
    eps: float = 1e-5
    gate_sigmoid: bool = False
    gate_uses_updated: bool = True
    init_gain: float = 0.05

    def validate(self) -> Tuple[bool, List[str]]:
        """Validate the architecture and return status and list of problems."""
        problems = []
        if self.width < 1:
            problems.append(f"width must be >= 1 (got {self.width})")
        if self.n_modalities < 1:
            problems.append(f"n_modalities must be >= 1 (got {self.n_modalities})")
        if self.groups < 1 or (self.width >= 1 and self.width % self.groups != 0):
            problems.append(
                f"groups ({self.groups}) must divide width ({self.width})"
            )
        if not self.eps > 0:
            problems.append(f"eps must be > 0 (got {self.eps})")
        if not self.init_gain > 0:
            problems.append(f"init_gain must be > 0 (got {self.init_gain})")
        _fail("FusionConfig", problems)
        return True, problems


@dataclass(frozen=True)
class SolverConfig:
    """Settings for a forward fixed-point or adjoint solve."""

    method: str = "anderson"
    tol: float = 1e-4
    max_steps: int = 100
    memory: int = 5
    beta: float = 1.0
    ridge: float = 1e-4
    early_stop: bool = True
    two_phase: bool = False
    trace_target: str = "joint"
    divergence_threshold: float = 1e6

    def validate(self) -> Tuple[bool, List[str]]:
        """Validate solver settings and return status and list of problems."""
        problems = []
        if self.method not in SOLVER_METHODS:
            problems.append(
                f"method must be one of {SOLVER_METHODS} (got {self.method})"
            )
        if not self.tol > 0:
            problems.append(f"tol must be > 0 (got {self.tol})")
        if self.max_steps < 1:
            problems.append(f"max_steps must be >= 1 (got {self.max_steps})")
        if self.memory < 1:
            problems.append(f"memory must be >= 1 (got {self.memory})")
        if not 0 < self.beta <= 1:
            problems.append(f"beta must be in (0, 1] (got {self.beta})")
        if self.ridge < 0:
            problems.append(f"ridge must be >= 0 (got {self.ridge})")
        if self.trace_target not in TRACE_TARGETS:
            problems.append(
                f"trace_target must be one of {TRACE_TARGETS} (got {self.trace_target})"
            )
        _fail("SolverConfig", problems)
        return True, problems

    @classmethod
    def backward(cls, method: str = "anderson") -> "SolverConfig":
        """Defaults for adjoint solves: tighter tolerance than the forward pass."""
        return cls(method=method, tol=1e-6, max_steps=100)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    jac_weight: float = 0.0
    jac_probes: int = 1
    seed: int = 0
    variant: str = "full"
    fusion_lr: Optional[float] = None
    modality_mask: Optional[Tuple[bool, ...]] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    backward_solver: SolverConfig = field(default_factory=SolverConfig.backward)

    def validate(self) -> Tuple[bool, List[str]]:
        """Validate training settings and return status and list of problems."""
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.lr < 0:
            problems.append(f"lr must be >= 0 (got {self.lr})")
        if self.fusion_lr is not None and self.fusion_lr < 0:
            problems.append(f"fusion_lr must be >= 0 (got {self.fusion_lr})")
        if self.optimizer not in OPTIMIZERS:
            problems.append(
                f"optimizer must be one of {OPTIMIZERS} (got {self.optimizer})"
            )
        if self.jac_weight < 0:
            problems.append(f"jac_weight must be >= 0 (got {self.jac_weight})")
        if self.jac_probes < 1:
            problems.append(f"jac_probes must be >= 1 (got {self.jac_probes})")
        if self.variant not in VARIANT_NAMES:
            problems.append(
                f"variant must be one of {VARIANT_NAMES} (got {self.variant})"
            )
        _fail("TrainConfig", problems)
        self.solver.validate()
        self.backward_solver.validate()
        return True, problems


@dataclass(frozen=True)
class EnvSettings:
    """Process-level settings read from the environment (and a local .env file)."""

    threads: int = 1
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "EnvSettings":
        load_dotenv()
        raw_threads = os.getenv("DEQFUSE_THREADS", "1")
        try:
            threads = max(1, int(raw_threads))
        except ValueError:
            logger.error(f"DEQFUSE_THREADS must be an integer, got {raw_threads!r}")
            raise ConfigurationError(
                f"DEQFUSE_THREADS must be an integer, got {raw_threads!r}"
            )
        return cls(threads=threads, log_level=os.getenv("DEQFUSE_LOG_LEVEL", "INFO"))


# Per-command defaults; the lowest precedence layer under the config file and flags.
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "converge": {
        "out": "trace.csv",
        "memory": 5,
        "beta": 1.0,
        "ridge": 1e-4,
        "trace_target": "joint",
        "groups": 1,
        "gate_sigmoid": False,
        "gate_uses_updated": True,
        "n_modalities": 3,
        "dim": 64,
        "batch": 8,
        "solver": "anderson",
        "steps": 100,
        "runs": 1,
    },
    "gradcheck": {
        "n_modalities": 2,
        "dim": 6,
        "batch": 2,
        "seeds": 5,
        "tol": 1e-3,
        "unroll_steps": 100,
    },
    "train": {
        "out": "metrics.csv",
        "solver": "anderson",
        "n_modalities": 2,
        "dim": 16,
        "gate_sigmoid": False,
        "gate_uses_updated": True,
        "variant": "full",
        "epochs": 30,
        "batch": 64,
        "lr": 1e-3,
        "gamma": 0.0,
        "sigma": 0.3,
        "n_train": 2000,
        "n_test": 1000,
        "optimizer": "adam",
        "labeling": "parity",
    },
    "ablate": {
        "out": "ablation.csv",
        "solver": "anderson",
        "n_modalities": 2,
        "dim": 16,
        "gate_sigmoid": False,
        "gate_uses_updated": True,
        "epochs": 30,
        "batch": 64,
        "lr": 1e-3,
        "gamma": 0.0,
        "sigma": 0.3,
        "n_train": 2000,
        "n_test": 1000,
        "optimizer": "adam",
        "labeling": "parity",
        "seeds": 5,
    },
    "solvebench": {
        "out": "solvebench.csv",
        "memory": 5,
        "beta": 1.0,
        "ridge": 1e-4,
        "n_modalities": 3,
        "dim": 64,
        "batch": 8,
        "seeds": 10,
        "target_resid": 1e-3,
        "max_steps": 1000,
    },
}


@dataclass
class RunConfig(DataClassJsonMixin):
    """
    Parameter tree of one CLI invocation.

    Every field defaults to None meaning "not given"; :meth:`resolve` fills the gaps
    from the command defaults. Loading a JSON file with unknown keys raises.
    """

    dataclass_json_config = config(undefined=Undefined.RAISE)["dataclasses_json"]

    seed: Optional[int] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None
    n_modalities: Optional[int] = None
    dim: Optional[int] = None
    batch: Optional[int] = None
    groups: Optional[int] = None
    gate_sigmoid: Optional[bool] = None
    gate_uses_updated: Optional[bool] = None
    solver: Optional[str] = None
    steps: Optional[int] = None
    memory: Optional[int] = None
    beta: Optional[float] = None
    ridge: Optional[float] = None
    trace_target: Optional[str] = None
    runs: Optional[int] = None
    seeds: Optional[int] = None
    tol: Optional[float] = None
    unroll_steps: Optional[int] = None
    variant: Optional[str] = None
    epochs: Optional[int] = None
    lr: Optional[float] = None
    fusion_lr: Optional[float] = None
    gamma: Optional[float] = None
    optimizer: Optional[str] = None
    sigma: Optional[float] = None
    n_train: Optional[int] = None
    n_test: Optional[int] = None
    labeling: Optional[str] = None
    drop_modality: Optional[int] = None
    target_resid: Optional[float] = None
    max_steps: Optional[int] = None

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        """Load a JSON config file, rejecting unknown keys."""
        with open(path, "r") as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        try:
            return cls.from_dict(raw)
        except UndefinedParameterError as e:
            logger.error(f"Unknown keys in config file {path}: {e}")
            raise ConfigurationError(f"Unknown keys in config file {path}: {e}")

    def overridden_by(self, other: "RunConfig") -> "RunConfig":
        """Return a copy where every field set in ``other`` wins."""
        updates = {
            f.name: getattr(other, f.name)
            for f in fields(other)
            if getattr(other, f.name) is not None
        }
        return replace(self, **updates)

    def resolve(self, command: str) -> "RunConfig":
        """Fill unset fields from the defaults of ``command`` and validate."""
        if command not in COMMAND_DEFAULTS:
            raise ConfigurationError(f"Unknown command: {command}")
        defaults = RunConfig(seed=0, **COMMAND_DEFAULTS[command])
        resolved = defaults.overridden_by(self)
        resolved.validate()
        return resolved

    def validate(self) -> Tuple[bool, List[str]]:
        """Check value ranges of every field that is set."""
        problems = []
        positive = (
            "n_modalities", "dim", "batch", "steps", "memory", "runs", "seeds",
            "unroll_steps", "epochs", "n_train", "n_test", "max_steps", "groups",
        )
        for name in positive:
            value = getattr(self, name)
            if value is not None and value < 1:
                problems.append(f"{name} must be >= 1 (got {value})")
        if self.seed is not None and not 0 <= self.seed < 2**64:
            problems.append(
                f"seed must be an unsigned 64-bit integer (got {self.seed})"
            )
        if self.solver is not None and self.solver not in SOLVER_METHODS:
            problems.append(
                f"solver must be one of {SOLVER_METHODS} (got {self.solver})"
            )
        if self.variant is not None and self.variant not in VARIANT_NAMES:
            problems.append(
                f"variant must be one of {VARIANT_NAMES} (got {self.variant})"
            )
        if self.optimizer is not None and self.optimizer not in OPTIMIZERS:
            problems.append(
                f"optimizer must be one of {OPTIMIZERS} (got {self.optimizer})"
            )
        if self.trace_target is not None and self.trace_target not in TRACE_TARGETS:
            problems.append(
                f"trace_target must be one of {TRACE_TARGETS} (got {self.trace_target})"
            )
        if self.labeling is not None and self.labeling not in ("parity", "quadrant"):
            problems.append(
                f"labeling must be parity or quadrant (got {self.labeling})"
            )
        for name in ("tol", "target_resid", "sigma"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                problems.append(f"{name} must be > 0 (got {value})")
        for name in ("lr", "fusion_lr", "gamma", "ridge"):
            value = getattr(self, name)
            if value is not None and value < 0:
                problems.append(f"{name} must be >= 0 (got {value})")
        if self.beta is not None and not 0 < self.beta <= 1:
            problems.append(f"beta must be in (0, 1] (got {self.beta})")
        if (
            self.drop_modality is not None
            and self.n_modalities is not None
            and not 0 <= self.drop_modality < self.n_modalities
        ):
            problems.append(
                f"drop_modality must index a modality (got {self.drop_modality})"
            )
        _fail("RunConfig", problems)
        return True, problems
