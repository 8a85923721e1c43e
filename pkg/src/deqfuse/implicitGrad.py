"""
Implicit differentiation through the fusion equilibrium.

The backward pass never differentiates through solver iterations. At the fixed point
``z* = f(z*)`` the cotangent ``u`` of ``z*`` solves ``u = u J_f + dl/dz*``, which is
itself a fixed-point problem driven only by vector-Jacobian products. The system is
block triangular, so one adjoint solve handles the fused state and one solve per
modality handles the modality states.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from deqfuse.baseSolver import Array, SolverTrace
from deqfuse.config import SolverConfig
from deqfuse.equilibrium import EquilibriumState, JointMap, JointState, solve
from deqfuse.errors import ConvergenceError, ShapeError
from deqfuse.layers import FusionLayout, FusionParams, ModalityBundle, Tensor2
from deqfuse.logger import get_logger
from deqfuse.numCore import RngState, frobenius, rademacher
from deqfuse.solverFactory import SolverFactory

logger = get_logger("deqfuse.implicitGrad")

VjpFn = Callable[[Array], Array]


@dataclass
class AdjointState:
    u_fuse: Tensor2
    u_all: List[Tensor2]
    traces: Dict[str, SolverTrace] = field(default_factory=dict)


@dataclass
class GradientBundle:
    """Cotangents for every FusionParams array and every injected feature."""

    params: FusionParams
    inputs: List[Tensor2]
    adjoint: Optional[AdjointState] = None

    @property
    def importance(self) -> Tensor2:
        return self.params.importance

    def named_arrays(self) -> Dict[str, Tensor2]:
        named = dict(self.params.named_arrays())
        for i, dx in enumerate(self.inputs):
            named[f"x.{i}"] = dx
        return named

    def add(self, other: "GradientBundle") -> "GradientBundle":
        mine, theirs = self.params.named_arrays(), other.params.named_arrays()
        return GradientBundle(
            params=self.params.with_arrays({k: mine[k] + theirs[k] for k in mine}),
            inputs=[a + b for a, b in zip(self.inputs, other.inputs)],
        )


def solve_adjoint(
    map_vjp: VjpFn,
    dl_dz: Array,
    cfg: Optional[SolverConfig] = None,
    label: str = "adjoint",
) -> Tuple[Array, SolverTrace]:
    """
    Solve ``u = map_vjp(u) + dl_dz`` by fixed-point iteration from ``dl_dz``.

    Convergence is measured as ``||map_vjp(u) + dl_dz - u|| / ||dl_dz||``. A zero
    cotangent returns zeros without iterating.

    Raises:
        DivergenceError: The adjoint iteration blew up, i.e. the Jacobian at the
            fixed point is not contractive.
    """
    cfg = cfg or SolverConfig.backward()
    scale = frobenius(dl_dz)
    if scale == 0.0:
        return np.zeros_like(dl_dz), SolverTrace(converged=True, method=cfg.method)

    def step(u: Array) -> Array:
        return map_vjp(u) + dl_dz

    def measure(fu: Array, u: Array) -> float:
        return frobenius(fu - u) / scale

    solver = SolverFactory.create_solver(cfg)
    u, trace = solver.solve(step, dl_dz.copy(), measure=measure, label=label)
    return u, trace


def backward(
    eq: EquilibriumState,
    x: ModalityBundle,
    params: FusionParams,
    dl_dzfuse: Tensor2,
    cfg: Optional[SolverConfig] = None,
) -> GradientBundle:
    """
    Gradients of a loss w.r.t. every parameter and input, given ``dl/dz_fuse*``.

    The fused adjoint ``u_fuse`` is solved first. Its VJP through the fuse step gives
    the fuse and gate gradients, the cotangent of the injected fused feature and a
    cotangent ``v_i`` for every modality state. Each ``v_i`` seeds a per-modality
    adjoint solve whose VJP gives that block's gradients and its input cotangent. The
    injected fused feature routes ``w_i * dx_fuse`` to each ``x_i`` directly.

    Raises:
        ConvergenceError: The forward state or an adjoint solve did not reach its
            tolerance, so the implicit gradient would be wrong.
    """
    cfg = cfg or SolverConfig.backward()
    if dl_dzfuse.shape != eq.z_fuse.shape:
        message = (
            f"Cotangent shape {dl_dzfuse.shape} does not match z_fuse {eq.z_fuse.shape}"
        )
        logger.error(message)
        raise ShapeError(message)
    if not eq.converged:
        message = (
            f"Forward equilibrium did not converge (rel diff "
            f"{eq.trace.final_rel_diff:.3g} after {eq.trace.steps_taken} steps)"
        )
        logger.error(message)
        raise ConvergenceError(message, eq.trace)
    jm = JointMap(x, params, eq.layout, eq.gate_uses_updated)

    if not np.any(dl_dzfuse):
        zeros = GradientBundle(
            params=params.zeros_like(), inputs=[np.zeros_like(f) for f in x.features]
        )
        zeros.adjoint = AdjointState(
            np.zeros_like(dl_dzfuse), [np.zeros_like(dl_dzfuse)] * x.n_modalities
        )
        return zeros

    _, inter = jm.forward(eq.state)
    traces: Dict[str, SolverTrace] = {}
    grads: Dict[str, Tensor2] = {}

    if eq.layout.fuse_block:
        u_fuse, traces["fuse"] = solve_adjoint(
            lambda u: jm.fuse_vjp(inter, u).dz_fuse,
            dl_dzfuse,
            cfg,
            label="adjoint fuse",
        )
    else:
        u_fuse = dl_dzfuse
    fuse = jm.fuse_vjp(inter, u_fuse)
    grads.update(fuse.grads)
    inputs, injected = jm.injected_vjp(fuse.dx_fuse)
    grads.update(injected)

    u_all = []
    for i in range(x.n_modalities):
        v_i = fuse.dz_used[i]
        if eq.layout.modality_blocks:
            u_i, traces[f"block.{i}"] = solve_adjoint(
                lambda u, i=i: jm.block_vjp(inter, i, u)[0],
                v_i,
                cfg,
                label=f"adjoint block {i}",
            )
        else:
            u_i = v_i
        _, dx_i, block_grads = jm.block_vjp(inter, i, u_i)
        inputs[i] = inputs[i] + dx_i
        grads.update(block_grads)
        u_all.append(u_i)

    for label, trace in traces.items():
        if not trace.converged:
            message = (
                f"Adjoint {label} solve did not converge (rel diff "
                f"{trace.final_rel_diff:.3g} after {trace.steps_taken} steps)"
            )
            logger.error(message)
            raise ConvergenceError(message, trace)

    bundle = GradientBundle(params=jm.grads_to_params(grads), inputs=inputs)
    bundle.adjoint = AdjointState(u_fuse, u_all, traces)
    logger.debug(
        "Implicit backward done: "
        + ", ".join(f"{k}={t.steps_taken}" for k, t in traces.items())
    )
    return bundle


def backward_unrolled(
    x: ModalityBundle,
    params: FusionParams,
    dl_dzfuse: Tensor2,
    k_steps: int,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
) -> GradientBundle:
    """
    Reverse-mode gradients of ``k_steps`` explicit sweeps of the joint map from zero.

    Every sweep shares the same weights, so parameter and input cotangents from each
    sweep are summed.
    """
    if k_steps < 1:
        raise ValueError(f"k_steps must be >= 1, got {k_steps}")
    jm = JointMap(x, params, layout, gate_uses_updated)
    state = jm.zeros()
    tape = []
    for _ in range(k_steps):
        state, inter = jm.forward(state)
        tape.append(inter)

    cot = JointState(
        z_all=[np.zeros_like(dl_dzfuse) for _ in range(x.n_modalities)],
        z_fuse=dl_dzfuse,
    )
    total: Optional[GradientBundle] = None
    for inter in reversed(tape):
        step = jm.vjp(inter, cot)
        bundle = GradientBundle(params=step.params, inputs=step.inputs)
        total = bundle if total is None else total.add(bundle)
        cot = step.state
    assert total is not None
    return total


def hutchinson_frobenius(
    vjp: VjpFn, shape: Tuple[int, ...], rng: RngState, probes: int
) -> float:
    """Unbiased estimate of ``||J||_F^2 / dim`` from ``probes`` Rademacher VJPs."""
    if probes < 1:
        raise ValueError(f"probes must be >= 1, got {probes}")
    dim = int(np.prod(shape))
    total = 0.0
    for _ in range(probes):
        eps = rademacher(rng, shape)
        v = vjp(eps)
        total += float(np.sum(v * v)) / dim
    return total / probes


def jacobian_reg(
    params: FusionParams,
    x: ModalityBundle,
    eq: EquilibriumState,
    rng: RngState,
    probes: int = 1,
) -> float:
    """Hutchinson estimate of the joint-map Jacobian's ||J||_F^2 per dim."""
    jm = JointMap(x, params, eq.layout, eq.gate_uses_updated)
    _, inter = jm.forward(eq.state)
    n = x.n_modalities

    def state_vjp(eps: Array) -> Array:
        return jm.vjp(inter, JointState.unpack(eps, n)).state.pack()

    return hutchinson_frobenius(state_vjp, eq.state.pack().shape, rng, probes)


def jacobian_reg_grad(
    params: FusionParams,
    x: ModalityBundle,
    eq: EquilibriumState,
    rng: RngState,
    probes: int = 1,
    h: float = 1e-4,
) -> Tuple[float, FusionParams]:
    """
    Jacobian penalty and its parameter gradient at a frozen fixed point.

    For each probe ``q = eps^T J`` and the gradient of ``||q||^2`` is
    ``2 d/dp <eps, J q>``, a Hessian-vector product obtained by central differences of
    the parameter VJP along ``q``. Draws the same probes as :func:`jacobian_reg`.
    """
    jm = JointMap(x, params, eq.layout, eq.gate_uses_updated)
    n = x.n_modalities
    s_star = eq.state.pack()
    dim = int(np.prod(s_star.shape))
    _, inter = jm.forward(eq.state)

    value = 0.0
    acc = {k: np.zeros_like(v) for k, v in params.named_arrays().items()}
    for _ in range(probes):
        eps = rademacher(rng, s_star.shape)
        cot = JointState.unpack(eps, n)
        q = jm.vjp(inter, cot).state.pack()
        value += float(np.sum(q * q)) / dim
        q_norm = frobenius(q)
        if q_norm == 0.0:
            continue
        direction = q / q_norm
        _, inter_plus = jm.forward(JointState.unpack(s_star + h * direction, n))
        _, inter_minus = jm.forward(JointState.unpack(s_star - h * direction, n))
        plus = jm.vjp(inter_plus, cot).params.named_arrays()
        minus = jm.vjp(inter_minus, cot).params.named_arrays()
        for name in acc:
            acc[name] += (plus[name] - minus[name]) * (q_norm / (2.0 * h))

    scale = 2.0 / (dim * probes)
    grads = params.with_arrays({k: v * scale for k, v in acc.items()})
    return value / probes, grads


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradcheckEntry:
    name: str
    fd_error: float
    unrolled_error: float

    def passed(self, tol: float) -> bool:
        return self.fd_error < tol and self.unrolled_error < tol


@dataclass
class GradcheckReport:
    seed: int
    entries: List[GradcheckEntry]

    def passed(self, tol: float) -> bool:
        return all(e.passed(tol) for e in self.entries)

    @property
    def max_fd_error(self) -> float:
        return max(e.fd_error for e in self.entries)

    @property
    def max_unrolled_error(self) -> float:
        return max(e.unrolled_error for e in self.entries)


def max_rel_error(a: Array, b: Array) -> float:
    """``max|a - b| / max(max|a|, max|b|, 1e-8)``."""
    denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-8)
    return float(np.max(np.abs(a - b))) / denom


def finite_difference_grads(
    x: ModalityBundle,
    params: FusionParams,
    cotangent: Tensor2,
    cfg: SolverConfig,
    h: float = 1e-4,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
) -> Dict[str, Tensor2]:
    """Central differences of ``<cotangent, z_fuse*>``, one array entry at a time."""

    def loss(xb: ModalityBundle, p: FusionParams) -> float:
        eq = solve(xb, p, cfg, layout, gate_uses_updated)
        return float(np.sum(cotangent * eq.z_fuse))

    grads: Dict[str, Tensor2] = {}
    for name, arr in params.named_arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            g[idx] = (
                loss(x, params.with_arrays({name: plus}))
                - loss(x, params.with_arrays({name: minus}))
            ) / (2.0 * h)
        grads[name] = g

    for i, feat in enumerate(x.features):
        g = np.zeros_like(feat)
        for idx in np.ndindex(feat.shape):
            plus, minus = feat.copy(), feat.copy()
            plus[idx] += h
            minus[idx] -= h
            bumped_plus = list(x.features)
            bumped_plus[i] = plus
            bumped_minus = list(x.features)
            bumped_minus[i] = minus
            g[idx] = (
                loss(ModalityBundle(bumped_plus), params)
                - loss(ModalityBundle(bumped_minus), params)
            ) / (2.0 * h)
        grads[f"x.{i}"] = g
    return grads


def gradcheck(
    x: ModalityBundle,
    params: FusionParams,
    cotangent: Tensor2,
    seed: int = 0,
    unroll_steps: int = 100,
    h: float = 1e-4,
    forward_cfg: Optional[SolverConfig] = None,
    gate_uses_updated: bool = True,
) -> GradcheckReport:
    """
    Compare the implicit gradient with central finite differences and with
    reverse-mode through ``unroll_steps`` explicit sweeps, per named array.
    """
    forward_cfg = forward_cfg or SolverConfig(tol=1e-10, max_steps=2000)
    backward_cfg = replace(SolverConfig.backward(), tol=1e-10, max_steps=2000)
    layout = FusionLayout()
    eq = solve(x, params, forward_cfg, layout, gate_uses_updated)
    implicit = backward(eq, x, params, cotangent, backward_cfg).named_arrays()
    fd = finite_difference_grads(
        x, params, cotangent, forward_cfg, h, layout, gate_uses_updated
    )
    unrolled = backward_unrolled(
        x, params, cotangent, unroll_steps, layout, gate_uses_updated
    ).named_arrays()

    entries = [
        GradcheckEntry(
            name=name,
            fd_error=max_rel_error(implicit[name], fd[name]),
            unrolled_error=max_rel_error(implicit[name], unrolled[name]),
        )
        for name in implicit
    ]
    report = GradcheckReport(seed=seed, entries=entries)
    logger.info(
        f"gradcheck seed {seed}: max fd error {report.max_fd_error:.3e}, "
        f"max unrolled error {report.max_unrolled_error:.3e}"
    )
    return report
