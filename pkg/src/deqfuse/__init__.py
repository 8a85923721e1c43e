#  ____  _____ ___  _____
# |  _ \| ____/ _ \|  ___|   _ ___  ___
# | | | |  _|| | | | |_ | | | / __|/ _ \
# | |_| | |__| |_| |  _|| |_| \__ \  __/
# |____/|_____\__\_\_|   \__,_|___/\___|

"""DeqFuse: deep equilibrium multimodal fusion with implicit gradients."""

from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version("deqfuse")  # dynamically fetch version from pyproject.toml
except PackageNotFoundError:
    __version__ = "0.0.0"


from .config import FusionConfig, SolverConfig, TrainConfig, RunConfig
from .errors import (
    DeqFuseError,
    ShapeError,
    ConfigurationError,
    NumericError,
    DivergenceError,
    ConvergenceError,
    StateError,
    TrainingAbortedError,
)
from .layers import FusionLayout, FusionParams, ModalityBundle
from .solverFactory import SolverFactory
from .equilibrium import EquilibriumState, JointState, joint_map, residual, solve
from .implicitGrad import GradientBundle, backward, backward_unrolled, jacobian_reg
from .training import AblationVariant, HeadParams, forward_predict, train
from .checkpoint import Checkpoint
from .logger import setup_logging, get_logger
from .loggerConfig import LogConfig

__all__ = [
    "FusionConfig",
    "SolverConfig",
    "TrainConfig",
    "RunConfig",
    "DeqFuseError",
    "ShapeError",
    "ConfigurationError",
    "NumericError",
    "DivergenceError",
    "ConvergenceError",
    "StateError",
    "TrainingAbortedError",
    "FusionLayout",
    "FusionParams",
    "ModalityBundle",
    "SolverFactory",
    "EquilibriumState",
    "JointState",
    "joint_map",
    "residual",
    "solve",
    "GradientBundle",
    "backward",
    "backward_unrolled",
    "jacobian_reg",
    "AblationVariant",
    "HeadParams",
    "forward_predict",
    "train",
    "Checkpoint",
    "setup_logging",
    "get_logger",
    "LogConfig",
]
