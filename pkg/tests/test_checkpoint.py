import json
import pytest
import numpy as np
from typing import Any

from deqfuse.checkpoint import ArrayRecord, Checkpoint
from deqfuse.config import FusionConfig
from deqfuse.errors import ConfigurationError
from deqfuse.layers import FusionParams
from deqfuse.numCore import RngState
from deqfuse.training import HeadParams


@pytest.fixture
def params() -> FusionParams:
    return FusionParams.initialize(
        FusionConfig(width=4, n_modalities=3, groups=2, gate_sigmoid=True), RngState(0)
    )


@pytest.fixture
def head() -> HeadParams:
    return HeadParams.initialize(4, 4, RngState(1))


def test_round_trip_is_bit_exact(
    tmp_path: Any, params: FusionParams, head: HeadParams
) -> None:
    path = str(tmp_path / "model.json")
    Checkpoint.from_params(params, head, seed=7).save(path)
    loaded = Checkpoint.load(path)
    restored, restored_head = loaded.to_params()

    assert loaded.seed == 7
    assert restored.groups == 2
    assert restored.gate_sigmoid is True
    for name, arr in params.named_arrays().items():
        np.testing.assert_array_equal(restored.named_arrays()[name], arr)
    assert restored_head is not None
    np.testing.assert_array_equal(restored_head.weight, head.weight)
    np.testing.assert_array_equal(restored_head.bias, head.bias)


def test_gate_setting_survives_round_trip(tmp_path: Any, params: FusionParams) -> None:
    path = str(tmp_path / "model.json")
    Checkpoint.from_params(params, gate_uses_updated=False).save(path)
    loaded = Checkpoint.load(path)
    assert loaded.gate_uses_updated is False
    fusion = loaded.fusion_config()
    assert fusion.gate_uses_updated is False
    assert fusion.gate_sigmoid is True
    assert (fusion.width, fusion.n_modalities, fusion.groups) == (4, 3, 2)
    assert Checkpoint.from_params(params).gate_uses_updated is True


def test_save_load_save_is_byte_identical(tmp_path: Any, params: FusionParams) -> None:
    first = tmp_path / "a.json"
    second = tmp_path / "b.json"
    Checkpoint.from_params(params).save(str(first))
    Checkpoint.load(str(first)).save(str(second))
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_without_head(params: FusionParams) -> None:
    restored, head = Checkpoint.from_params(params).to_params()
    assert head is None
    assert restored.n_modalities == 3


def test_unsupported_format_version(params: FusionParams) -> None:
    checkpoint = Checkpoint.from_params(params)
    checkpoint.format_version = 2
    with pytest.raises(ConfigurationError, match="format version"):
        checkpoint.to_params()


def test_missing_and_misshapen_arrays(params: FusionParams) -> None:
    checkpoint = Checkpoint.from_params(params)
    checkpoint.arrays = checkpoint.arrays[:-1]
    with pytest.raises(ConfigurationError, match="lacks arrays"):
        checkpoint.to_params()

    checkpoint = Checkpoint.from_params(params)
    name = checkpoint.arrays[0].name
    checkpoint.arrays[0] = ArrayRecord.from_array(name, np.zeros((2, 2)))
    with pytest.raises(ConfigurationError, match="does not fit the model"):
        checkpoint.to_params()


def test_record_size_must_match_shape() -> None:
    with pytest.raises(ConfigurationError):
        ArrayRecord(name="fuse.bias", shape=[3], values=[1.0, 2.0]).to_array()


def test_non_finite_values_are_rejected(tmp_path: Any, params: FusionParams) -> None:
    path = tmp_path / "model.json"
    Checkpoint.from_params(params).save(str(path))
    raw = json.loads(path.read_text())
    raw["arrays"][0]["values"][0] = float("nan")
    path.write_text(json.dumps(raw))
    with pytest.raises(ConfigurationError, match="non-finite"):
        Checkpoint.load(str(path)).to_params()
