"""
Joint fixed-point system of the fusion layer and its solvers.

The state holds one feature per modality plus the fused feature. It is packed into a
single ``batch x (N + 1) d`` matrix, one row per sample ordered
``[z_1 .. z_N, z_fuse]``, so the solvers only ever see one array.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from deqfuse.baseSolver import Array, Measure, SolverTrace
from deqfuse.config import SolverConfig
from deqfuse.errors import ShapeError
from deqfuse.layers import (
    FuseIntermediates,
    FusionIntermediates,
    FusionLayout,
    FusionParams,
    ModalityBundle,
    Tensor2,
    fuse_step_forward,
    fuse_step_vjp,
    injected_fusion,
    injected_fusion_vjp,
    modality_block_forward,
    modality_block_vjp,
)
from deqfuse.logger import get_logger
from deqfuse.numCore import batch_rel_diff
from deqfuse.solverFactory import SolverFactory

logger = get_logger("deqfuse.equilibrium")

__all__ = [
    "EquilibriumState",
    "JointCotangents",
    "JointMap",
    "JointState",
    "SolverTrace",
    "joint_map",
    "residual",
    "solve",
    "solve_anderson",
    "solve_naive",
]


@dataclass
class JointState:
    z_all: List[Tensor2]
    z_fuse: Tensor2

    def __post_init__(self) -> None:
        for i, z in enumerate(self.z_all):
            if z.shape != self.z_fuse.shape:
                logger.error(
                    f"JointState block {i} has shape {z.shape}, "
                    f"fused {self.z_fuse.shape}"
                )
                raise ShapeError(
                    f"JointState block {i} has shape {z.shape}, "
                    f"fused block has {self.z_fuse.shape}"
                )

    @property
    def n_modalities(self) -> int:
        return len(self.z_all)

    @property
    def blocks(self) -> List[Tensor2]:
        return [*self.z_all, self.z_fuse]

    def pack(self) -> Array:
        return np.ascontiguousarray(np.concatenate(self.blocks, axis=1))

    @classmethod
    def unpack(cls, packed: Array, n_modalities: int) -> "JointState":
        if packed.ndim != 2 or packed.shape[1] % (n_modalities + 1) != 0:
            logger.error(f"Cannot split {packed.shape} into {n_modalities + 1} blocks")
            raise ShapeError(
                f"Cannot split packed state {packed.shape} "
                f"into {n_modalities + 1} blocks"
            )
        chunks = np.split(packed, n_modalities + 1, axis=1)
        parts = [np.ascontiguousarray(p) for p in chunks]
        return cls(z_all=parts[:-1], z_fuse=parts[-1])

    @classmethod
    def zeros(cls, batch: int, width: int, n_modalities: int) -> "JointState":
        return cls(
            z_all=[np.zeros((batch, width)) for _ in range(n_modalities)],
            z_fuse=np.zeros((batch, width)),
        )

    def __sub__(self, other: "JointState") -> "JointState":
        return JointState(
            z_all=[a - b for a, b in zip(self.z_all, other.z_all)],
            z_fuse=self.z_fuse - other.z_fuse,
        )


@dataclass
class JointCotangents:
    """Reverse sweep of one joint-map application."""

    state: JointState
    params: FusionParams
    inputs: List[Tensor2]


@dataclass
class FuseBackprop:
    dz_fuse: Tensor2
    dz_used: List[Tensor2]
    dx_fuse: Optional[Tensor2]
    grads: Dict[str, Tensor2] = field(default_factory=dict)


class JointMap:
    """
    One synchronous sweep ``(z_1 .. z_N, z_fuse) -> (f_1(z_1), .., f_fuse(z_fuse))``.

    ``layout`` switches components off for ablations: without modality blocks the
    per-modality state is the injected feature itself, without the fuse block the
    fused state is the plain sum of the per-modality states, and without the gate the
    fuse step sums the unpurified ``z_i``.
    """

    def __init__(
        self,
        x: ModalityBundle,
        params: FusionParams,
        layout: FusionLayout = FusionLayout(),
        gate_uses_updated: bool = True,
    ):
        if x.width != params.width or x.n_modalities != params.n_modalities:
            logger.error(
                f"Inputs ({x.n_modalities} x {x.width}) do not match params "
                f"({params.n_modalities} x {params.width})"
            )
            raise ShapeError(
                f"Inputs ({x.n_modalities} modalities, width {x.width}) do not match "
                f"params ({params.n_modalities} modalities, width {params.width})"
            )
        self.x = x
        self.params = params
        self.layout = layout
        self.gate_uses_updated = gate_uses_updated

    @property
    def n_modalities(self) -> int:
        return self.x.n_modalities

    @cached_property
    def x_fuse(self) -> Tensor2:
        return injected_fusion(self.x, self.params.importance)

    def zeros(self) -> JointState:
        return JointState.zeros(self.x.batch, self.x.width, self.n_modalities)

    # -- forward ------------------------------------------------------------

    def blocks_forward(
        self, z_all: Sequence[Tensor2]
    ) -> Tuple[List[Tensor2], FusionIntermediates]:
        inter = FusionIntermediates()
        updated = []
        for i, (z_i, x_i) in enumerate(zip(z_all, self.x.features)):
            if self.layout.modality_blocks:
                out, block_inter = modality_block_forward(z_i, x_i, self.params, i)
                updated.append(out)
                inter.blocks.append(block_inter)
            else:
                if z_i.shape != x_i.shape:
                    raise ShapeError(
                        f"State block {i} {z_i.shape} vs input {x_i.shape}"
                    )
                updated.append(x_i)
                inter.blocks.append(None)
        return updated, inter

    def fuse_forward(
        self, z_fuse: Tensor2, z_used: Sequence[Tensor2]
    ) -> Tuple[Tensor2, Optional[FuseIntermediates]]:
        if self.layout.fuse_block:
            return fuse_step_forward(
                z_fuse, z_used, self.x_fuse, self.params, use_gate=self.layout.gate
            )
        if z_fuse.shape != z_used[0].shape:
            raise ShapeError(
                f"Fused state {z_fuse.shape} vs modality {z_used[0].shape}"
            )
        return np.sum(z_used, axis=0), None

    def forward(self, state: JointState) -> Tuple[JointState, FusionIntermediates]:
        if state.n_modalities != self.n_modalities:
            raise ShapeError(
                f"State has {state.n_modalities} modality blocks, inputs have "
                f"{self.n_modalities}"
            )
        z_new, inter = self.blocks_forward(state.z_all)
        z_used = z_new if self.gate_uses_updated else state.z_all
        z_fuse, inter.fuse = self.fuse_forward(state.z_fuse, z_used)
        return JointState(z_all=z_new, z_fuse=z_fuse), inter

    def __call__(self, state: JointState) -> JointState:
        return self.forward(state)[0]

    def apply_packed(self, packed: Array) -> Array:
        return self(JointState.unpack(packed, self.n_modalities)).pack()

    # -- reverse ------------------------------------------------------------

    def block_vjp(
        self, inter: FusionIntermediates, i: int, upstream: Tensor2
    ) -> Tuple[Tensor2, Tensor2, Dict[str, Tensor2]]:
        """Cotangents of block ``i`` w.r.t. its state, its input and its weights."""
        if not self.layout.modality_blocks:
            return np.zeros_like(upstream), upstream, {}
        cot = modality_block_vjp(inter.blocks[i], self.params, i, upstream)
        grads = {f"blocks.{i}.{name}": arr for name, arr in cot.grads.arrays()}
        return cot.dz, cot.dx, grads

    def fuse_vjp(self, inter: FusionIntermediates, upstream: Tensor2) -> FuseBackprop:
        """Cotangents of the fuse update w.r.t. z_fuse, each z_i used and x_fuse."""
        if not self.layout.fuse_block:
            return FuseBackprop(
                dz_fuse=np.zeros_like(upstream),
                dz_used=[upstream for _ in range(self.n_modalities)],
                dx_fuse=None,
            )
        cot = fuse_step_vjp(inter.fuse, self.params, upstream)
        grads = {
            "fuse.theta": cot.fuse_theta,
            "fuse.bias": cot.fuse_bias,
            "fuse.gn_scale": cot.gn_scale,
            "fuse.gn_shift": cot.gn_shift,
        }
        if self.layout.gate:
            grads["gate.theta"] = cot.gate_theta
            grads["gate.bias"] = cot.gate_bias
        return FuseBackprop(cot.dz_fuse, cot.dz_all, cot.dx_fuse, grads)

    def injected_vjp(
        self, dx_fuse: Optional[Tensor2]
    ) -> Tuple[List[Tensor2], Dict[str, Tensor2]]:
        """Route the x_fuse cotangent back to each x_i and the importance weights."""
        if dx_fuse is None:
            return [np.zeros_like(f) for f in self.x.features], {}
        dx, dw = injected_fusion_vjp(self.x, self.params.importance, dx_fuse)
        return dx, {"importance": dw}

    def vjp(self, inter: FusionIntermediates, cot: JointState) -> JointCotangents:
        """Reverse sweep of :meth:`forward` against the output cotangent ``cot``."""
        grads: Dict[str, Tensor2] = {}
        fuse = self.fuse_vjp(inter, cot.z_fuse)
        _accumulate(grads, fuse.grads)
        inputs, injected = self.injected_vjp(fuse.dx_fuse)
        _accumulate(grads, injected)

        dz_state = []
        for i in range(self.n_modalities):
            upstream = cot.z_all[i]
            if self.gate_uses_updated:
                upstream = upstream + fuse.dz_used[i]
            dz, dx, block_grads = self.block_vjp(inter, i, upstream)
            if not self.gate_uses_updated:
                dz = dz + fuse.dz_used[i]
            dz_state.append(dz)
            inputs[i] = inputs[i] + dx
            _accumulate(grads, block_grads)

        return JointCotangents(
            state=JointState(z_all=dz_state, z_fuse=fuse.dz_fuse),
            params=self.grads_to_params(grads),
            inputs=inputs,
        )

    def grads_to_params(self, grads: Dict[str, Tensor2]) -> FusionParams:
        """Dense FusionParams-shaped gradient; names not in ``grads`` are zero."""
        zeros = {k: np.zeros_like(v) for k, v in self.params.named_arrays().items()}
        zeros.update(grads)
        return self.params.with_arrays(zeros)


def _accumulate(into: Dict[str, Tensor2], grads: Dict[str, Tensor2]) -> None:
    for name, g in grads.items():
        into[name] = into[name] + g if name in into else g


@dataclass
class EquilibriumState:
    state: JointState
    trace: SolverTrace
    layout: FusionLayout = FusionLayout()
    gate_uses_updated: bool = True

    @property
    def converged(self) -> bool:
        return self.trace.converged

    @property
    def z_fuse(self) -> Tensor2:
        return self.state.z_fuse


def joint_map(
    s: JointState,
    x: ModalityBundle,
    params: FusionParams,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
) -> JointState:
    """One synchronous sweep of every modality block followed by the fuse step."""
    return JointMap(x, params, layout, gate_uses_updated)(s)


def residual(
    s: JointState,
    x: ModalityBundle,
    params: FusionParams,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
) -> JointState:
    return joint_map(s, x, params, layout, gate_uses_updated) - s


def _fuse_measure(width: int) -> Measure:
    def measure(fs: Array, s: Array) -> float:
        return batch_rel_diff(fs[:, -width:], s[:, -width:])

    return measure


def solve(
    x: ModalityBundle,
    params: FusionParams,
    cfg: SolverConfig,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
    record: bool = False,
) -> EquilibriumState:
    """
    Solve the joint system from the zero state with the solver named by ``cfg``.

    With ``cfg.two_phase`` the block-triangular structure is used instead: the
    modality states are solved first, then the fused state with those frozen. The two
    traces are concatenated.

    Raises:
        DivergenceError: The residual blew up; the partial trace is attached.
    """
    jm = JointMap(x, params, layout, gate_uses_updated)
    solver = SolverFactory.create_solver(cfg)

    if cfg.two_phase:
        state, trace = _solve_two_phase(jm, cfg, record)
    else:
        measure = _fuse_measure(x.width) if cfg.trace_target == "fuse" else None
        packed, trace = solver.solve(
            jm.apply_packed, jm.zeros().pack(), measure=measure, record=record
        )
        state = JointState.unpack(packed, jm.n_modalities)

    logger.debug(
        f"Equilibrium solve ({cfg.method}): {trace.steps_taken} steps, "
        f"rel_diff {trace.final_rel_diff:.3e}, converged={trace.converged}"
    )
    return EquilibriumState(state, trace, layout, gate_uses_updated)


def _solve_two_phase(
    jm: JointMap, cfg: SolverConfig, record: bool
) -> Tuple[JointState, SolverTrace]:
    solver = SolverFactory.create_solver(cfg)
    n = jm.n_modalities
    zero = jm.zeros()

    def blocks_map(packed: Array) -> Array:
        z_all = np.split(packed, n, axis=1)
        return np.concatenate(jm.blocks_forward(z_all)[0], axis=1)

    packed_blocks, block_trace = solver.solve(
        blocks_map, np.concatenate(zero.z_all, axis=1), record=record, label="blocks"
    )
    z_star = [np.ascontiguousarray(z) for z in np.split(packed_blocks, n, axis=1)]

    def fuse_map(z_fuse: Array) -> Array:
        return jm.fuse_forward(z_fuse, z_star)[0]

    z_fuse, fuse_trace = solver.solve(
        fuse_map, zero.z_fuse, record=record, label="fuse"
    )
    return JointState(z_all=z_star, z_fuse=z_fuse), block_trace.extend(fuse_trace)


def solve_naive(
    x: ModalityBundle,
    params: FusionParams,
    cfg: SolverConfig,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
    record: bool = False,
) -> EquilibriumState:
    naive = replace(cfg, method="naive")
    return solve(x, params, naive, layout, gate_uses_updated, record)


def solve_anderson(
    x: ModalityBundle,
    params: FusionParams,
    cfg: SolverConfig,
    layout: FusionLayout = FusionLayout(),
    gate_uses_updated: bool = True,
    record: bool = False,
) -> EquilibriumState:
    return solve(
        x, params, replace(cfg, method="anderson"), layout, gate_uses_updated, record
    )
