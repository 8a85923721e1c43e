import pytest
import numpy as np
from typing import Callable, List

from deqfuse.config import FusionConfig
from deqfuse.errors import ConfigurationError, ShapeError, StateError
from deqfuse.layers import (
    FusionParams,
    ModalityBundle,
    affine,
    affine_vjp,
    fuse_step,
    fuse_step_forward,
    fuse_step_vjp,
    gate,
    group_norm,
    group_norm_forward,
    group_norm_vjp,
    injected_fusion,
    injected_fusion_vjp,
    modality_block,
    modality_block_forward,
    modality_block_vjp,
)
from deqfuse.numCore import RngState, randn

Array = np.ndarray


def numeric_grad(fn: Callable[[Array], float], x: Array, h: float = 1e-6) -> Array:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


@pytest.fixture
def params() -> FusionParams:
    cfg = FusionConfig(width=6, n_modalities=2, groups=2)
    return FusionParams.initialize(cfg, RngState(0))


@pytest.fixture
def inputs() -> List[Array]:
    rng = RngState(1)
    return [randn(rng, 3, 6) for _ in range(3)]


def test_initialize_shapes_and_defaults(params: FusionParams) -> None:
    assert params.width == 6
    assert params.n_modalities == 2
    np.testing.assert_array_equal(params.importance, [0.5, 0.5])
    np.testing.assert_array_equal(params.blocks[0].gn_scale, np.ones((3, 6)))
    np.testing.assert_array_equal(params.fuse_bias, np.zeros(6))
    cfg = FusionConfig(width=6, n_modalities=2, groups=2)
    again = FusionParams.initialize(cfg, RngState(0))
    np.testing.assert_array_equal(params.fuse_theta, again.fuse_theta)


def test_initialize_scales_recurrent_weights_by_gain() -> None:
    cfg = FusionConfig(width=64, n_modalities=2, init_gain=0.1)
    params = FusionParams.initialize(cfg, RngState(3))
    assert abs(params.blocks[0].theta_hat.std() - 1 / 8) < 0.01
    assert abs(params.blocks[0].theta_tilde.std() - 0.1 / 8) < 0.001
    assert abs(params.gate_theta.std() - 0.1 / 8) < 0.001
    assert abs(params.fuse_theta.std() - 0.1 / 8) < 0.001
    with pytest.raises(ConfigurationError, match="init_gain must be > 0"):
        FusionParams.initialize(
            FusionConfig(width=4, n_modalities=2, init_gain=0.0), RngState(0)
        )


def test_named_arrays_cover_every_tensor_once(params: FusionParams) -> None:
    names = list(params.named_arrays())
    assert len(names) == len(set(names))
    assert "blocks.1.theta_tilde" in names
    assert names[-1] == "importance"
    assert {"gate.theta", "gate.bias", "fuse.theta", "fuse.bias"} <= set(names)


def test_with_arrays_rejects_unknown_names(params: FusionParams) -> None:
    with pytest.raises(ConfigurationError, match="Unknown parameter names"):
        params.with_arrays({"no.such": np.zeros(1)})


def test_validate_rejects_bad_groups(params: FusionParams) -> None:
    params.groups = 4
    with pytest.raises(ConfigurationError, match="must divide"):
        params.validate()


def test_modality_bundle_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        ModalityBundle([np.zeros((2, 3)), np.zeros((2, 4))])
    with pytest.raises(ConfigurationError):
        ModalityBundle([])


def test_affine_shape_error() -> None:
    with pytest.raises(ShapeError):
        affine(np.ones((2, 3)), np.ones((4, 4)), np.zeros(4))


def test_affine_vjp_matches_finite_differences() -> None:
    rng = RngState(5)
    x, W, b, up = randn(rng, 3, 4), randn(rng, 2, 4), np.zeros(2), randn(rng, 3, 2)
    dx, dW, db = affine_vjp(x, W, up)
    fd_x = numeric_grad(lambda v: float(np.sum(up * affine(v, W, b))), x)
    fd_W = numeric_grad(lambda v: float(np.sum(up * affine(x, v, b))), W)
    np.testing.assert_allclose(dx, fd_x, atol=1e-7)
    np.testing.assert_allclose(dW, fd_W, atol=1e-7)
    np.testing.assert_allclose(db, up.sum(axis=0))


def test_group_norm_standardises_each_group() -> None:
    x = randn(RngState(2), 5, 6) * 3.0 + 1.0
    out = group_norm(x, 3, 1e-12, np.ones(6), np.zeros(6))
    grouped = out.reshape(5, 3, 2)
    np.testing.assert_allclose(grouped.mean(axis=2), 0.0, atol=1e-10)
    np.testing.assert_allclose(grouped.var(axis=2), 1.0, atol=1e-8)


def test_group_norm_rejects_indivisible_groups(
    caplog: pytest.LogCaptureFixture,
) -> None:
    caplog.set_level("ERROR", logger="deqfuse.layers")
    with pytest.raises(ConfigurationError):
        group_norm(np.ones((2, 6)), 4, 1e-5, np.ones(6), np.zeros(6))
    assert "must divide" in caplog.text


def test_group_norm_vjp_matches_finite_differences() -> None:
    rng = RngState(6)
    x = randn(rng, 3, 6)
    scale = 1.0 + randn(rng, 1, 6)[0] * 0.1
    shift = randn(rng, 1, 6)[0]
    up = randn(rng, 3, 6)
    _, cache = group_norm_forward(x, 2, 1e-5, scale, shift)
    dx, dscale, dshift = group_norm_vjp(cache, up)

    def loss_x(v: Array) -> float:
        return float(np.sum(up * group_norm(v, 2, 1e-5, scale, shift)))

    def loss_scale(v: Array) -> float:
        return float(np.sum(up * group_norm(x, 2, 1e-5, v, shift)))

    np.testing.assert_allclose(dx, numeric_grad(loss_x, x), atol=1e-6)
    np.testing.assert_allclose(dscale, numeric_grad(loss_scale, scale), atol=1e-6)
    np.testing.assert_allclose(dshift, up.sum(axis=0))


def test_modality_block_vjp_matches_finite_differences(
    params: FusionParams, inputs: List[Array]
) -> None:
    z, x, up = inputs
    _, inter = modality_block_forward(z, x, params, 1)
    cot = modality_block_vjp(inter, params, 1, up)

    def loss_state(v: Array) -> float:
        return float(np.sum(up * modality_block(v, x, params, 1)))

    def loss_input(v: Array) -> float:
        return float(np.sum(up * modality_block(z, v, params, 1)))

    np.testing.assert_allclose(cot.dz, numeric_grad(loss_state, z), atol=1e-6)
    np.testing.assert_allclose(cot.dx, numeric_grad(loss_input, x), atol=1e-6)

    def loss_theta(v: Array) -> float:
        p = params.with_arrays({"blocks.1.theta_hat": v})
        return float(np.sum(up * modality_block(z, x, p, 1)))

    fd_theta = numeric_grad(loss_theta, params.blocks[1].theta_hat)
    np.testing.assert_allclose(cot.grads.theta_hat, fd_theta, atol=1e-6)


def test_modality_block_vjp_without_cache(params: FusionParams) -> None:
    with pytest.raises(StateError):
        modality_block_vjp(None, params, 0, np.zeros((1, 4)))
    with pytest.raises(StateError):
        fuse_step_vjp(None, params, np.zeros((1, 4)))


def test_gate_is_shared_affine_of_sum(
    params: FusionParams, inputs: List[Array]
) -> None:
    z_fuse, z_i, _ = inputs
    expected = (z_fuse + z_i) @ params.gate_theta.T + params.gate_bias
    np.testing.assert_allclose(gate(z_fuse, z_i, params), expected)
    params.gate_sigmoid = True
    squashed = gate(z_fuse, z_i, params)
    assert np.all((squashed > 0) & (squashed < 1))


def test_fuse_step_without_gate_sums_modalities(
    params: FusionParams, inputs: List[Array]
) -> None:
    z_fuse, z1, z2 = inputs
    x_fuse = np.zeros_like(z1)
    out, inter = fuse_step_forward(z_fuse, [z1, z2], x_fuse, params, use_gate=False)
    np.testing.assert_allclose(inter.summed, z1 + z2)
    assert inter.alphas == [None, None]
    # z_fuse only enters through the gate
    other = fuse_step(np.zeros_like(z_fuse), [z1, z2], x_fuse, params, use_gate=False)
    np.testing.assert_array_equal(out, other)


@pytest.mark.parametrize("use_gate", [True, False])
@pytest.mark.parametrize("sigmoid", [False, True])
def test_fuse_step_vjp_matches_finite_differences(
    params: FusionParams, inputs: List[Array], use_gate: bool, sigmoid: bool
) -> None:
    params.gate_sigmoid = sigmoid
    z_fuse, z1, z2 = inputs
    x_fuse = randn(RngState(9), 3, 6)
    up = randn(RngState(10), 3, 6)
    _, inter = fuse_step_forward(z_fuse, [z1, z2], x_fuse, params, use_gate)
    cot = fuse_step_vjp(inter, params, up)

    def run(zf: Array, a: Array, xf: Array, p: FusionParams) -> float:
        return float(np.sum(up * fuse_step(zf, [a, z2], xf, p, use_gate)))

    def with_array(name: str) -> Callable[[Array], float]:
        return lambda v: run(z_fuse, z1, x_fuse, params.with_arrays({name: v}))

    fd_fuse = numeric_grad(lambda v: run(v, z1, x_fuse, params), z_fuse)
    fd_first = numeric_grad(lambda v: run(z_fuse, v, x_fuse, params), z1)
    fd_injected = numeric_grad(lambda v: run(z_fuse, z1, v, params), x_fuse)
    np.testing.assert_allclose(cot.dz_fuse, fd_fuse, atol=1e-6)
    np.testing.assert_allclose(cot.dz_all[0], fd_first, atol=1e-6)
    np.testing.assert_allclose(cot.dx_fuse, fd_injected, atol=1e-6)
    fd_theta = numeric_grad(with_array("fuse.theta"), params.fuse_theta)
    np.testing.assert_allclose(cot.fuse_theta, fd_theta, atol=1e-6)
    if use_gate:
        fd_gate = numeric_grad(with_array("gate.theta"), params.gate_theta)
        np.testing.assert_allclose(cot.gate_theta, fd_gate, atol=1e-6)


def test_injected_fusion_selector(inputs: List[Array]) -> None:
    x = ModalityBundle(inputs[:2])
    np.testing.assert_array_equal(injected_fusion(x, np.array([1.0, 0.0])), inputs[0])
    with pytest.raises(ConfigurationError):
        injected_fusion(x, np.array([1.0, 0.0, 0.0]))


def test_injected_fusion_vjp(inputs: List[Array]) -> None:
    x = ModalityBundle(inputs[:2])
    w = np.array([0.3, -1.2])
    up = inputs[2]
    dx, dw = injected_fusion_vjp(x, w, up)
    np.testing.assert_allclose(dx[1], -1.2 * up)
    np.testing.assert_allclose(dw, [np.sum(up * inputs[0]), np.sum(up * inputs[1])])
