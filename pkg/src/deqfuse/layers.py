"""
Fusion layer maps and their vector-Jacobian products.

Every map comes in three flavours: a plain function returning the output, a
``*_forward`` variant that also returns the intermediates needed for the reverse
pass, and a ``*_vjp`` that consumes those intermediates and an upstream cotangent.
Affine maps act on batched rows, ``y = x @ W.T + b``, so ``W`` plays the role of the
weight matrix applied to a column feature.
"""

from dataclasses import dataclass, field, fields
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.special
from numpy.typing import NDArray

from deqfuse.config import FusionConfig
from deqfuse.errors import ConfigurationError, ShapeError, StateError
from deqfuse.logger import get_logger
from deqfuse.numCore import RngState, Tensor2, randn

logger = get_logger("deqfuse.layers")

Vector = NDArray[np.float64]

GN_SITES_PER_BLOCK = 3


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass
class ModalityBundle:
    """Injected per-modality features ``x_1 .. x_N``, each ``batch x d``."""

    features: List[Tensor2]

    def __post_init__(self) -> None:
        if not self.features:
            logger.error("ModalityBundle needs at least one modality")
            raise ConfigurationError("ModalityBundle needs at least one modality")
        first = self.features[0]
        if first.ndim != 2:
            raise ShapeError(f"Modality features must be batch x d, got {first.shape}")
        for i, feat in enumerate(self.features):
            if feat.shape != first.shape:
                logger.error(
                    f"Modality {i} has shape {feat.shape}, expected {first.shape}"
                )
                raise ShapeError(
                    f"Modality {i} has shape {feat.shape}, expected {first.shape}"
                )

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def width(self) -> int:
        return int(self.features[0].shape[1])

    @property
    def batch(self) -> int:
        return int(self.features[0].shape[0])

    def select(self, rows: NDArray[np.intp]) -> "ModalityBundle":
        return ModalityBundle([np.ascontiguousarray(f[rows]) for f in self.features])

    def masked(self, keep: Sequence[bool]) -> "ModalityBundle":
        """Zero the features of every modality whose ``keep`` flag is False."""
        if len(keep) != self.n_modalities:
            raise ConfigurationError(
                f"Mask has {len(keep)} entries for {self.n_modalities} modalities"
            )
        return ModalityBundle(
            [f if k else np.zeros_like(f) for f, k in zip(self.features, keep)]
        )


@dataclass
class ModalityBlockParams:
    """Weights of one modality block; ``gn_scale``/``gn_shift`` hold 3 sites x d."""

    theta_hat: Tensor2
    b_hat: Vector
    theta_tilde: Tensor2
    b_tilde: Vector
    gn_scale: Tensor2
    gn_shift: Tensor2

    def arrays(self) -> Iterator[Tuple[str, NDArray[np.float64]]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    @classmethod
    def zeros(cls, width: int) -> "ModalityBlockParams":
        return cls(
            theta_hat=np.zeros((width, width)),
            b_hat=np.zeros(width),
            theta_tilde=np.zeros((width, width)),
            b_tilde=np.zeros(width),
            gn_scale=np.zeros((GN_SITES_PER_BLOCK, width)),
            gn_shift=np.zeros((GN_SITES_PER_BLOCK, width)),
        )


@dataclass
class FusionParams:
    """Every learnable tensor of the fusion system plus its static settings."""

    blocks: List[ModalityBlockParams]
    gate_theta: Tensor2
    gate_bias: Vector
    fuse_theta: Tensor2
    fuse_bias: Vector
    fuse_gn_scale: Vector
    fuse_gn_shift: Vector
    importance: Vector
    groups: int = 1
    eps: float = 1e-5
    gate_sigmoid: bool = False

    @property
    def width(self) -> int:
        return int(self.gate_theta.shape[0])

    @property
    def n_modalities(self) -> int:
        return len(self.blocks)

    @classmethod
    def initialize(cls, cfg: FusionConfig, rng: RngState) -> "FusionParams":
        """
        Input projections ~ N(0, 1/d), recurrent weights ~ N(0, (gain/sqrt(d))^2).

        ``theta_tilde``, the gate and the fuse projection feed the state back into
        itself, so they are scaled by ``cfg.init_gain`` to keep the joint map a
        contraction. ``theta_hat`` sits in front of a group norm and keeps unit gain.
        Biases are 0, group-norm affines 1/0 and importance 1/N.
        """
        cfg.validate()
        d, n = cfg.width, cfg.n_modalities
        std = 1.0 / np.sqrt(d)
        recurrent_std = cfg.init_gain * std
        blocks = []
        for _ in range(n):
            blocks.append(
                ModalityBlockParams(
                    theta_hat=randn(rng, d, d, std),
                    b_hat=np.zeros(d),
                    theta_tilde=randn(rng, d, d, recurrent_std),
                    b_tilde=np.zeros(d),
                    gn_scale=np.ones((GN_SITES_PER_BLOCK, d)),
                    gn_shift=np.zeros((GN_SITES_PER_BLOCK, d)),
                )
            )
        params = cls(
            blocks=blocks,
            gate_theta=randn(rng, d, d, recurrent_std),
            gate_bias=np.zeros(d),
            fuse_theta=randn(rng, d, d, recurrent_std),
            fuse_bias=np.zeros(d),
            fuse_gn_scale=np.ones(d),
            fuse_gn_shift=np.zeros(d),
            importance=np.full(n, 1.0 / n),
            groups=cfg.groups,
            eps=cfg.eps,
            gate_sigmoid=cfg.gate_sigmoid,
        )
        logger.debug(f"Initialized fusion params: N={n}, d={d}, groups={cfg.groups}")
        return params

    def validate(self) -> None:
        d = self.width
        if d % self.groups != 0:
            logger.error(f"groups ({self.groups}) must divide width ({d})")
            raise ConfigurationError(f"groups ({self.groups}) must divide width ({d})")
        if self.importance.shape != (self.n_modalities,):
            raise ConfigurationError(
                f"importance has shape {self.importance.shape}, "
                f"expected ({self.n_modalities},)"
            )
        for name, arr in self.named_arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"Parameter {name} holds non-finite values")

    def named_arrays(self) -> Dict[str, NDArray[np.float64]]:
        """Every learnable array under a stable dotted name, in a fixed order."""
        named: Dict[str, NDArray[np.float64]] = {}
        for i, block in enumerate(self.blocks):
            for name, arr in block.arrays():
                named[f"blocks.{i}.{name}"] = arr
        named["gate.theta"] = self.gate_theta
        named["gate.bias"] = self.gate_bias
        named["fuse.theta"] = self.fuse_theta
        named["fuse.bias"] = self.fuse_bias
        named["fuse.gn_scale"] = self.fuse_gn_scale
        named["fuse.gn_shift"] = self.fuse_gn_shift
        named["importance"] = self.importance
        return named

    def with_arrays(self, named: Dict[str, NDArray[np.float64]]) -> "FusionParams":
        """New params with the given arrays substituted by name; others are shared."""
        current = self.named_arrays()
        unknown = set(named) - set(current)
        if unknown:
            raise ConfigurationError(f"Unknown parameter names: {sorted(unknown)}")
        merged = {**current, **named}
        blocks = [
            ModalityBlockParams(
                **{
                    f.name: merged[f"blocks.{i}.{f.name}"]
                    for f in fields(ModalityBlockParams)
                }
            )
            for i in range(self.n_modalities)
        ]
        return FusionParams(
            blocks=blocks,
            gate_theta=merged["gate.theta"],
            gate_bias=merged["gate.bias"],
            fuse_theta=merged["fuse.theta"],
            fuse_bias=merged["fuse.bias"],
            fuse_gn_scale=merged["fuse.gn_scale"],
            fuse_gn_shift=merged["fuse.gn_shift"],
            importance=merged["importance"],
            groups=self.groups,
            eps=self.eps,
            gate_sigmoid=self.gate_sigmoid,
        )

    def zeros_like(self) -> "FusionParams":
        named = self.named_arrays()
        return self.with_arrays({k: np.zeros_like(v) for k, v in named.items()})

    def copy(self) -> "FusionParams":
        return self.with_arrays({k: v.copy() for k, v in self.named_arrays().items()})


@dataclass(frozen=True)
class FusionLayout:
    """Which components of the fusion layer are active (ablation switches)."""

    modality_blocks: bool = True
    fuse_block: bool = True
    gate: bool = True


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def affine(x: Tensor2, weight: Tensor2, bias: Vector) -> Tensor2:
    if x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        logger.error(
            f"affine: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
        raise ShapeError(
            f"affine: input {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return x @ weight.T + bias


def affine_vjp(
    x: Tensor2, weight: Tensor2, upstream: Tensor2
) -> Tuple[Tensor2, Tensor2, Vector]:
    """Cotangents of ``x @ W.T + b`` w.r.t. input, weight and bias."""
    return upstream @ weight, upstream.T @ x, upstream.sum(axis=0)


def relu(x: Tensor2) -> Tensor2:
    return np.maximum(x, 0.0)


def relu_vjp(x: Tensor2, upstream: Tensor2) -> Tensor2:
    # Subgradient at exactly zero is taken as zero.
    return np.where(x > 0.0, upstream, 0.0)


def hadamard_vjp(
    a: Tensor2, b: Tensor2, upstream: Tensor2
) -> Tuple[Tensor2, Tensor2]:
    """Cotangents of ``a * b`` w.r.t. ``a`` and ``b``."""
    return upstream * b, upstream * a


def sum_vjp(count: int, upstream: Tensor2) -> List[Tensor2]:
    """Cotangents of ``sum(terms)``: the upstream flows unchanged to each term."""
    return [upstream for _ in range(count)]


@dataclass
class GroupNormCache:
    x_hat: Tensor2
    inv_std: NDArray[np.float64]
    scale: Vector
    groups: int


def group_norm_forward(
    x: Tensor2, groups: int, eps: float, scale: Vector, shift: Vector
) -> Tuple[Tensor2, GroupNormCache]:
    batch, d = x.shape
    if groups < 1 or d % groups != 0:
        logger.error(f"group_norm: groups ({groups}) must divide width ({d})")
        raise ConfigurationError(
            f"group_norm: groups ({groups}) must divide width ({d})"
        )
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"group_norm: scale {scale.shape} / shift {shift.shape} vs width {d}"
        )
    grouped = x.reshape(batch, groups, d // groups)
    mean = grouped.mean(axis=2, keepdims=True)
    centered = grouped - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (centered * inv_std).reshape(batch, d)
    return x_hat * scale + shift, GroupNormCache(x_hat, inv_std, scale, groups)


def group_norm(
    x: Tensor2, groups: int, eps: float, scale: Vector, shift: Vector
) -> Tensor2:
    """
    Standardise each of ``groups`` contiguous channel groups per sample, then apply
    the per-channel affine ``scale``/``shift``. Uses the biased group variance with
    ``eps`` inside the square root.
    """
    return group_norm_forward(x, groups, eps, scale, shift)[0]


def group_norm_vjp(
    cache: GroupNormCache, upstream: Tensor2
) -> Tuple[Tensor2, Vector, Vector]:
    """Cotangents w.r.t. input, scale and shift."""
    batch, d = upstream.shape
    k = d // cache.groups
    d_shift = upstream.sum(axis=0)
    d_scale = (upstream * cache.x_hat).sum(axis=0)
    d_xhat = (upstream * cache.scale).reshape(batch, cache.groups, k)
    x_hat = cache.x_hat.reshape(batch, cache.groups, k)
    dx = cache.inv_std * (
        d_xhat
        - d_xhat.mean(axis=2, keepdims=True)
        - x_hat * (d_xhat * x_hat).mean(axis=2, keepdims=True)
    )
    return dx.reshape(batch, d), d_scale, d_shift


# ---------------------------------------------------------------------------
# Modality block
# ---------------------------------------------------------------------------


@dataclass
class BlockIntermediates:
    z: Tensor2
    z_hat: Tensor2
    z_tilde: Tensor2
    norm1: Tensor2
    gn1: GroupNormCache
    gn2: GroupNormCache
    gn3: GroupNormCache


@dataclass
class BlockCotangents:
    dz: Tensor2
    dx: Tensor2
    grads: ModalityBlockParams


def _check_pair(a: Tensor2, b: Tensor2, width: int, what: str) -> None:
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != width:
        logger.error(f"{what}: shapes {a.shape} and {b.shape} for width {width}")
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} for width {width}")


def modality_block_forward(
    z: Tensor2, x: Tensor2, params: FusionParams, i: int
) -> Tuple[Tensor2, BlockIntermediates]:
    _check_pair(z, x, params.width, f"modality_block[{i}]")
    p = params.blocks[i]
    g, eps = params.groups, params.eps

    norm1, gn1 = group_norm_forward(
        affine(z, p.theta_hat, p.b_hat), g, eps, p.gn_scale[0], p.gn_shift[0]
    )
    z_hat = relu(norm1)
    pre2 = affine(z_hat, p.theta_tilde, p.b_tilde) + x
    z_tilde, gn2 = group_norm_forward(pre2, g, eps, p.gn_scale[1], p.gn_shift[1])
    out, gn3 = group_norm_forward(relu(z_tilde), g, eps, p.gn_scale[2], p.gn_shift[2])
    return out, BlockIntermediates(z, z_hat, z_tilde, norm1, gn1, gn2, gn3)


def modality_block(z: Tensor2, x: Tensor2, params: FusionParams, i: int) -> Tensor2:
    """Block ``GN(ReLU(GN(theta~ ReLU(GN(theta^ z + b^)) + x + b~)))``."""
    return modality_block_forward(z, x, params, i)[0]


def modality_block_vjp(
    inter: Optional[BlockIntermediates],
    params: FusionParams,
    i: int,
    upstream: Tensor2,
) -> BlockCotangents:
    if inter is None:
        logger.error(f"modality_block_vjp[{i}] called without cached intermediates")
        raise StateError(f"modality_block_vjp[{i}] needs a cached forward pass")
    p = params.blocks[i]

    d_relu2, d_scale3, d_shift3 = group_norm_vjp(inter.gn3, upstream)
    d_ztilde = relu_vjp(inter.z_tilde, d_relu2)
    d_pre2, d_scale2, d_shift2 = group_norm_vjp(inter.gn2, d_ztilde)
    d_zhat, d_theta_tilde, d_b_tilde = affine_vjp(inter.z_hat, p.theta_tilde, d_pre2)
    d_norm1 = relu_vjp(inter.norm1, d_zhat)
    d_pre1, d_scale1, d_shift1 = group_norm_vjp(inter.gn1, d_norm1)
    dz, d_theta_hat, d_b_hat = affine_vjp(inter.z, p.theta_hat, d_pre1)

    grads = ModalityBlockParams(
        theta_hat=d_theta_hat,
        b_hat=d_b_hat,
        theta_tilde=d_theta_tilde,
        b_tilde=d_b_tilde,
        gn_scale=np.stack([d_scale1, d_scale2, d_scale3]),
        gn_shift=np.stack([d_shift1, d_shift2, d_shift3]),
    )
    return BlockCotangents(dz=dz, dx=d_pre2, grads=grads)


# ---------------------------------------------------------------------------
# Soft gate and fusion step
# ---------------------------------------------------------------------------


@dataclass
class GateCache:
    summed: Tensor2
    alpha: Tensor2


def gate_forward(
    z_fuse: Tensor2, z_i: Tensor2, params: FusionParams
) -> Tuple[Tensor2, GateCache]:
    _check_pair(z_fuse, z_i, params.width, "gate")
    summed = z_fuse + z_i
    alpha = affine(summed, params.gate_theta, params.gate_bias)
    if params.gate_sigmoid:
        alpha = scipy.special.expit(alpha)
    return alpha, GateCache(summed, alpha)


def gate(z_fuse: Tensor2, z_i: Tensor2, params: FusionParams) -> Tensor2:
    """Per-modality weight ``theta_a (z_fuse + z_i) + b_a``; weights are shared."""
    return gate_forward(z_fuse, z_i, params)[0]


def gate_vjp(
    cache: GateCache, params: FusionParams, upstream: Tensor2
) -> Tuple[Tensor2, Tensor2, Vector]:
    """Cotangent of the summed input (same for both arguments), weight and bias."""
    d_pre = upstream
    if params.gate_sigmoid:
        d_pre = upstream * cache.alpha * (1.0 - cache.alpha)
    return affine_vjp(cache.summed, params.gate_theta, d_pre)


@dataclass
class FuseIntermediates:
    z_fuse: Tensor2
    gates: List[Optional[GateCache]]
    summed: Tensor2
    z_hat_fuse: Tensor2
    pre: Tensor2
    gn: GroupNormCache
    n_modalities: int
    use_gate: bool

    @property
    def alphas(self) -> List[Optional[Tensor2]]:
        return [g.alpha if g is not None else None for g in self.gates]


@dataclass
class FuseCotangents:
    dz_fuse: Tensor2
    dz_all: List[Tensor2]
    dx_fuse: Tensor2
    gate_theta: Tensor2
    gate_bias: Vector
    fuse_theta: Tensor2
    fuse_bias: Vector
    gn_scale: Vector
    gn_shift: Vector


def fuse_step_forward(
    z_fuse: Tensor2,
    z_all: Sequence[Tensor2],
    x_fuse: Tensor2,
    params: FusionParams,
    use_gate: bool = True,
) -> Tuple[Tensor2, FuseIntermediates]:
    if len(z_all) == 0:
        logger.error("fuse_step needs at least one modality feature")
        raise ConfigurationError("fuse_step needs at least one modality feature")
    _check_pair(z_fuse, x_fuse, params.width, "fuse_step")
    for z_i in z_all:
        _check_pair(z_fuse, z_i, params.width, "fuse_step")

    gates: List[Optional[GateCache]] = []
    summed = np.zeros_like(z_fuse)
    for z_i in z_all:
        if use_gate:
            alpha, cache = gate_forward(z_fuse, z_i, params)
            summed = summed + alpha * z_fuse
            gates.append(cache)
        else:
            summed = summed + z_i
            gates.append(None)

    z_hat_fuse = affine(summed, params.fuse_theta, params.fuse_bias)
    pre = z_hat_fuse + x_fuse
    out, gn = group_norm_forward(
        relu(pre), params.groups, params.eps, params.fuse_gn_scale, params.fuse_gn_shift
    )
    return out, FuseIntermediates(
        z_fuse, gates, summed, z_hat_fuse, pre, gn, len(z_all), use_gate
    )


def fuse_step(
    z_fuse: Tensor2,
    z_all: Sequence[Tensor2],
    x_fuse: Tensor2,
    params: FusionParams,
    use_gate: bool = True,
) -> Tensor2:
    """
    Purify-then-combine update of the fused feature.

    Each modality purifies the fused state with its gate, ``z_i' = alpha_i * z_fuse``
    (or ``z_i' = z_i`` with the gate disabled); the purified pieces are summed and
    passed through ``GN(ReLU(theta_fuse sum + b_fuse + x_fuse))``.
    """
    return fuse_step_forward(z_fuse, z_all, x_fuse, params, use_gate)[0]


def fuse_step_vjp(
    inter: Optional[FuseIntermediates], params: FusionParams, upstream: Tensor2
) -> FuseCotangents:
    if inter is None:
        logger.error("fuse_step_vjp called without cached intermediates")
        raise StateError("fuse_step_vjp needs a cached forward pass")

    d_act, d_scale, d_shift = group_norm_vjp(inter.gn, upstream)
    d_pre = relu_vjp(inter.pre, d_act)
    d_summed, d_fuse_theta, d_fuse_bias = affine_vjp(
        inter.summed, params.fuse_theta, d_pre
    )

    dz_fuse = np.zeros_like(upstream)
    d_gate_theta = np.zeros_like(params.gate_theta)
    d_gate_bias = np.zeros_like(params.gate_bias)
    dz_all: List[Tensor2] = []
    for d_term, cache in zip(sum_vjp(inter.n_modalities, d_summed), inter.gates):
        if cache is None:
            dz_all.append(d_term)
            continue
        d_alpha, d_zf = hadamard_vjp(cache.alpha, inter.z_fuse, d_term)
        d_in, d_theta, d_bias = gate_vjp(cache, params, d_alpha)
        dz_fuse = dz_fuse + d_zf + d_in
        dz_all.append(d_in)
        d_gate_theta = d_gate_theta + d_theta
        d_gate_bias = d_gate_bias + d_bias

    return FuseCotangents(
        dz_fuse=dz_fuse,
        dz_all=dz_all,
        dx_fuse=d_pre,
        gate_theta=d_gate_theta,
        gate_bias=d_gate_bias,
        fuse_theta=d_fuse_theta,
        fuse_bias=d_fuse_bias,
        gn_scale=d_scale,
        gn_shift=d_shift,
    )


# ---------------------------------------------------------------------------
# Injected fused feature
# ---------------------------------------------------------------------------


def injected_fusion(x: ModalityBundle, w: Vector) -> Tensor2:
    """Weighted sum ``sum_i w_i x_i`` of the injected modality features."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != x.n_modalities:
        logger.error(
            f"injected_fusion: {w.shape[0]} weights for {x.n_modalities} modalities"
        )
        raise ConfigurationError(
            f"injected_fusion: {w.shape[0]} weights for {x.n_modalities} modalities"
        )
    out = np.zeros_like(x.features[0])
    for w_i, x_i in zip(w, x.features):
        out = out + w_i * x_i
    return out


def injected_fusion_vjp(
    x: ModalityBundle, w: Vector, upstream: Tensor2
) -> Tuple[List[Tensor2], Vector]:
    """Cotangents w.r.t. each ``x_i`` and the weight vector."""
    dx = [w_i * upstream for w_i in np.asarray(w).reshape(-1)]
    dw = np.array([float(np.sum(upstream * x_i)) for x_i in x.features])
    return dx, dw


@dataclass
class FusionIntermediates:
    """Everything one joint sweep caches, per modality and for the fuse step."""

    blocks: List[Optional[BlockIntermediates]] = field(default_factory=list)
    fuse: Optional[FuseIntermediates] = None
