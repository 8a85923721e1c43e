from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from dataclasses_json import DataClassJsonMixin
from numpy.typing import NDArray

from deqfuse.config import FusionConfig
from deqfuse.errors import ConfigurationError
from deqfuse.layers import FusionParams, ModalityBlockParams
from deqfuse.logger import get_logger
from deqfuse.training import HeadParams

logger = get_logger("deqfuse.checkpoint")

FORMAT_VERSION = 1


@dataclass
class ArrayRecord(DataClassJsonMixin):
    """One named array, row-major values with shape metadata."""

    name: str
    shape: List[int]
    values: List[float]

    @classmethod
    def from_array(cls, name: str, arr: NDArray[np.float64]) -> "ArrayRecord":
        values = [float(v) for v in arr.ravel()]
        return cls(name=name, shape=list(arr.shape), values=values)

    def to_array(self) -> NDArray[np.float64]:
        arr = np.array(self.values, dtype=np.float64)
        expected = int(np.prod(self.shape)) if self.shape else 1
        if arr.size != expected:
            raise ConfigurationError(
                f"Array {self.name} holds {arr.size} values for shape {self.shape}"
            )
        return arr.reshape(self.shape)


@dataclass
class Checkpoint(DataClassJsonMixin):
    """
    JSON snapshot of a trained (or freshly initialised) fusion model.

    Floats are written with Python's shortest round-trip representation, so
    save -> load reproduces every parameter bit-exactly and save -> load -> save
    reproduces the file byte-for-byte.
    """

    width: int
    n_modalities: int
    groups: int
    eps: float
    gate_sigmoid: bool
    seed: int
    arrays: List[ArrayRecord]
    head: List[ArrayRecord] = field(default_factory=list)
    gate_uses_updated: bool = True
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_params(
        cls,
        params: FusionParams,
        head: Optional[HeadParams] = None,
        seed: int = 0,
        gate_uses_updated: bool = True,
    ) -> "Checkpoint":
        head_records = []
        if head is not None:
            head_records = [
                ArrayRecord.from_array("head.weight", head.weight),
                ArrayRecord.from_array("head.bias", head.bias),
            ]
        return cls(
            width=params.width,
            n_modalities=params.n_modalities,
            groups=params.groups,
            eps=params.eps,
            gate_sigmoid=params.gate_sigmoid,
            seed=seed,
            arrays=[
                ArrayRecord.from_array(k, v) for k, v in params.named_arrays().items()
            ],
            head=head_records,
            gate_uses_updated=gate_uses_updated,
        )

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            width=self.width,
            n_modalities=self.n_modalities,
            groups=self.groups,
            eps=self.eps,
            gate_sigmoid=self.gate_sigmoid,
            gate_uses_updated=self.gate_uses_updated,
        )

    def to_params(self) -> Tuple[FusionParams, Optional[HeadParams]]:
        if self.format_version != FORMAT_VERSION:
            logger.error(f"Unsupported checkpoint format version {self.format_version}")
            raise ConfigurationError(
                f"Unsupported checkpoint format version {self.format_version}"
            )
        template = FusionParams(
            blocks=[
                ModalityBlockParams.zeros(self.width) for _ in range(self.n_modalities)
            ],
            gate_theta=np.zeros((self.width, self.width)),
            gate_bias=np.zeros(self.width),
            fuse_theta=np.zeros((self.width, self.width)),
            fuse_bias=np.zeros(self.width),
            fuse_gn_scale=np.zeros(self.width),
            fuse_gn_shift=np.zeros(self.width),
            importance=np.zeros(self.n_modalities),
            groups=self.groups,
            eps=self.eps,
            gate_sigmoid=self.gate_sigmoid,
        )
        expected = template.named_arrays()
        named: Dict[str, NDArray[np.float64]] = {}
        for record in self.arrays:
            arr = record.to_array()
            if record.name not in expected or arr.shape != expected[record.name].shape:
                raise ConfigurationError(
                    f"Checkpoint array {record.name} {arr.shape} does not fit the model"
                )
            named[record.name] = arr
        missing = set(expected) - set(named)
        if missing:
            raise ConfigurationError(f"Checkpoint lacks arrays: {sorted(missing)}")
        params = template.with_arrays(named)
        params.validate()

        head = None
        if self.head:
            by_name = {r.name: r.to_array() for r in self.head}
            head = HeadParams(by_name["head.weight"], by_name["head.bias"])
        return params, head

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json(indent=1))
            f.write("\n")
        logger.info(f"Wrote checkpoint to {path}")

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "r") as f:
            checkpoint = cls.from_json(f.read())
        logger.debug(
            f"Loaded checkpoint from {path} (format {checkpoint.format_version})"
        )
        return checkpoint
