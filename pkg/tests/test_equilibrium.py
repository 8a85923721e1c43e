import pytest
import numpy as np
from typing import Callable, List

from deqfuse.config import FusionConfig, SolverConfig
from deqfuse.equilibrium import (
    JointMap,
    JointState,
    joint_map,
    residual,
    solve,
    solve_anderson,
    solve_naive,
)
from deqfuse.errors import ShapeError
from deqfuse.layers import (
    FusionLayout,
    FusionParams,
    ModalityBundle,
    fuse_step,
    injected_fusion,
    modality_block,
)
from deqfuse.numCore import RngState, batch_rel_diff, randn
from deqfuse.syntheticTask import SyntheticTaskSpec, gen_signproduct

Array = np.ndarray


def make_instance(seed: int, n: int = 2, width: int = 8, batch: int = 4):
    rng = RngState(seed)
    params = FusionParams.initialize(FusionConfig(width=width, n_modalities=n), rng)
    x = ModalityBundle([randn(rng, batch, width) for _ in range(n)])
    return x, params


def random_state(seed: int, n: int, batch: int, width: int) -> JointState:
    rng = RngState(seed)
    return JointState(
        z_all=[randn(rng, batch, width) for _ in range(n)],
        z_fuse=randn(rng, batch, width),
    )


def numeric_grad(fn: Callable[[Array], float], x: Array, h: float = 1e-6) -> Array:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


def test_pack_unpack_preserves_blocks() -> None:
    state = random_state(0, 3, 2, 4)
    packed = state.pack()
    assert packed.shape == (2, 16)
    np.testing.assert_array_equal(packed[:, -4:], state.z_fuse)
    back = JointState.unpack(packed, 3)
    for a, b in zip(back.blocks, state.blocks):
        np.testing.assert_array_equal(a, b)


def test_joint_state_shape_errors() -> None:
    with pytest.raises(ShapeError):
        JointState(z_all=[np.zeros((2, 3))], z_fuse=np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        JointState.unpack(np.zeros((2, 10)), 2)


def test_joint_map_rejects_mismatched_inputs() -> None:
    x, params = make_instance(0)
    with pytest.raises(ShapeError):
        JointMap(ModalityBundle([np.zeros((4, 6)), np.zeros((4, 6))]), params)
    with pytest.raises(ShapeError):
        JointMap(x, params)(JointState.zeros(4, 8, 3))


def test_joint_map_is_composition_of_block_and_fuse_steps() -> None:
    x, params = make_instance(0, n=2, width=8)
    s = random_state(1, 2, 4, 8)
    out = joint_map(s, x, params)

    z_new = [modality_block(s.z_all[i], x.features[i], params, i) for i in range(2)]
    x_fuse = injected_fusion(x, params.importance)
    expected_fuse = fuse_step(s.z_fuse, z_new, x_fuse, params)

    for got, want in zip(out.z_all, z_new):
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out.z_fuse, expected_fuse, rtol=1e-12, atol=1e-12)


def test_gate_on_previous_states() -> None:
    x, params = make_instance(2)
    s = random_state(3, 2, 4, 8)
    out = joint_map(s, x, params, gate_uses_updated=False)
    x_fuse = injected_fusion(x, params.importance)
    np.testing.assert_allclose(out.z_fuse, fuse_step(s.z_fuse, s.z_all, x_fuse, params))


def test_residual_is_map_minus_state() -> None:
    x, params = make_instance(4)
    s = random_state(5, 2, 4, 8)
    r = residual(s, x, params)
    np.testing.assert_allclose(r.pack(), joint_map(s, x, params).pack() - s.pack())


def test_zero_weights_give_constant_map() -> None:
    """Zero weights make the map constant, so two sweeps reach the fixed point."""
    x, params = make_instance(6)
    zero = params.zeros_like()
    shifts = zero.with_arrays(
        {
            "blocks.0.gn_shift": np.full((3, 8), 0.5),
            "blocks.1.gn_shift": np.full((3, 8), -0.25),
            "fuse.gn_shift": np.full(8, 1.5),
        }
    )
    for method in ("naive", "anderson"):
        eq = solve(x, shifts, SolverConfig(method=method, tol=1e-10))
        assert eq.converged
        assert eq.trace.steps_taken <= 2
        np.testing.assert_allclose(eq.z_fuse, 1.5)
        np.testing.assert_allclose(eq.state.z_all[1], -0.25)


@pytest.mark.parametrize("seed", range(5))
def test_anderson_and_naive_agree(seed: int) -> None:
    x, params = make_instance(seed)
    cfg = SolverConfig(tol=1e-8, max_steps=2000)
    fast = solve_anderson(x, params, cfg)
    slow = solve_naive(x, params, cfg)
    assert fast.converged and slow.converged
    assert fast.trace.method == "anderson"
    assert slow.trace.method == "naive"
    np.testing.assert_allclose(fast.state.pack(), slow.state.pack(), atol=1e-5)


def test_converged_state_passes_verification_step() -> None:
    x, params = make_instance(7)
    cfg = SolverConfig(method="naive", tol=1e-6, max_steps=2000)
    eq = solve(x, params, cfg)
    assert eq.converged
    s = eq.state.pack()
    once_more = joint_map(eq.state, x, params).pack()
    assert batch_rel_diff(once_more, s) <= 1.1 * cfg.tol


def test_solve_is_deterministic() -> None:
    x, params = make_instance(8)
    cfg = SolverConfig(tol=1e-6)
    a = solve(x, params, cfg)
    b = solve(x, params, cfg)
    np.testing.assert_array_equal(a.state.pack(), b.state.pack())
    assert a.trace.rel_diffs == b.trace.rel_diffs


def test_two_phase_matches_joint_solve() -> None:
    x, params = make_instance(9)
    joint = solve(x, params, SolverConfig(tol=1e-10, max_steps=2000))
    phased = solve(x, params, SolverConfig(tol=1e-10, max_steps=2000, two_phase=True))
    assert phased.converged
    np.testing.assert_allclose(phased.state.pack(), joint.state.pack(), atol=1e-6)


def test_fuse_trace_target_measures_fused_block_only() -> None:
    x, params = make_instance(10)
    eq = solve(x, params, SolverConfig(tol=1e-6, trace_target="fuse"), record=True)
    assert eq.trace.iterates is not None
    s, fs = eq.trace.iterates[-1]
    assert eq.trace.rel_diffs[-1] == batch_rel_diff(fs[:, -8:], s[:, -8:])


def test_layout_without_fuse_block_sums_modalities() -> None:
    x, params = make_instance(11)
    cfg = SolverConfig(tol=1e-10, max_steps=500)
    eq = solve(x, params, cfg, FusionLayout(fuse_block=False))
    np.testing.assert_allclose(eq.z_fuse, np.sum(eq.state.z_all, axis=0), atol=1e-8)


def test_layout_without_modality_blocks_keeps_inputs() -> None:
    x, params = make_instance(12)
    eq = solve(x, params, SolverConfig(tol=1e-10), FusionLayout(modality_blocks=False))
    for z_i, x_i in zip(eq.state.z_all, x.features):
        np.testing.assert_array_equal(z_i, x_i)


@pytest.mark.parametrize("gate_uses_updated", [True, False])
@pytest.mark.parametrize(
    "layout",
    [FusionLayout(), FusionLayout(gate=False), FusionLayout(fuse_block=False)],
)
def test_one_sweep_vjp_matches_finite_differences(
    gate_uses_updated: bool, layout: FusionLayout
) -> None:
    x, params = make_instance(13, n=2, width=6, batch=2)
    s = random_state(14, 2, 2, 6)
    cot = random_state(15, 2, 2, 6)
    jm = JointMap(x, params, layout, gate_uses_updated)
    _, inter = jm.forward(s)
    back = jm.vjp(inter, cot)

    def loss_state(packed: Array) -> float:
        return float(np.sum(cot.pack() * jm.apply_packed(packed)))

    def loss_input(v: Array) -> float:
        bundle = ModalityBundle([v, x.features[1]])
        bumped = JointMap(bundle, params, layout, gate_uses_updated)(s)
        return float(np.sum(cot.pack() * bumped.pack()))

    def loss_importance(w: Array) -> float:
        p = params.with_arrays({"importance": w})
        bumped = JointMap(x, p, layout, gate_uses_updated)(s)
        return float(np.sum(cot.pack() * bumped.pack()))

    np.testing.assert_allclose(
        back.state.pack(), numeric_grad(loss_state, s.pack()), atol=1e-6
    )
    np.testing.assert_allclose(
        back.inputs[0], numeric_grad(loss_input, x.features[0]), atol=1e-6
    )
    np.testing.assert_allclose(
        back.params.importance,
        numeric_grad(loss_importance, params.importance),
        atol=1e-6,
    )


def test_default_init_converges_within_step_budget() -> None:
    cfg = SolverConfig(early_stop=False, max_steps=100)
    passed = 0
    for seed in range(10):
        x, params = make_instance(seed, n=3, width=64, batch=8)
        trace = solve_anderson(x, params, cfg).trace
        assert len(trace.rel_diffs) == 100
        if trace.rel_diffs[19] < 1e-2 and trace.rel_diffs[99] < 1e-3:
            passed += 1
    assert passed >= 9


def test_naive_residual_decreases_after_warmup() -> None:
    x, params = make_instance(3, n=3, width=64, batch=8)
    trace = solve_naive(x, params, SolverConfig(method="naive", tol=1e-10)).trace
    assert trace.converged
    diffs = trace.rel_diffs
    for k in range(3, len(diffs) - 1):
        assert diffs[k + 1] <= diffs[k]


def test_anderson_needs_no_more_steps_than_naive() -> None:
    wins = 0
    for seed in range(10):
        x, params = make_instance(seed, n=3, width=64, batch=8)
        fast = solve_anderson(x, params, SolverConfig())
        slow = solve_naive(x, params, SolverConfig(method="naive"))
        assert fast.converged and slow.converged
        wins += fast.trace.steps_taken <= slow.trace.steps_taken
    assert wins >= 9


def test_training_batches_converge_at_default_init() -> None:
    for seed in range(10):
        rng = RngState(seed)
        data = gen_signproduct(SyntheticTaskSpec(n_train=64, n_test=4), rng)
        params = FusionParams.initialize(FusionConfig(width=16, n_modalities=2), rng)
        eq = solve(data.train.x, params, SolverConfig())
        assert eq.converged, f"seed {seed}: {eq.trace.rel_diffs[-1]}"
