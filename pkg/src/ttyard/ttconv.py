"""Hardware-friendly TT factorization of conv kernels.

An l x l kernel (S, C, l, l) is reshaped to a 3-dim tensor with modes
(l*l, C, S) and decomposed into three cores

    K[s, c, i, j] = sum_{r1, r2} G1[i, j, r1] * G2[r1, c, r2] * G3[r2, s]

which lowers to three stacked convolutions: a 1x1 conv C -> R1*R2, an l x l
group conv with groups=R2 whose single (R1, l, l) kernel is shared by every
group, and a 1x1 conv R2 -> S.  1x1 kernels instead get a plain low-rank
matrix factorization executed as two pointwise convs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor_core import svd, tt_svd

# Rank heuristic constants: the matrix engine multiplies 16x16 tiles, so
# ranks divisible by 16 keep it fully utilized.
SPATIAL_R2 = 16
POINTWISE_R = 16
MIN_CHANNELS = 128


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel) < 1:
            raise ValueError("channel counts and kernel size must be >= 1")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("invalid stride/padding")


@dataclass(frozen=True)
class RankChoice:
    """Ranks for one decomposition: (R1, R2) for spatial kernels, R for 1x1."""

    kind: str  # "spatial" | "pointwise"
    r1: int | None = None
    r2: int | None = None
    r: int | None = None

    def __post_init__(self):
        if self.kind == "spatial":
            if self.r1 is None or self.r2 is None or self.r1 < 1 or self.r2 < 1:
                raise ValueError("spatial RankChoice needs r1, r2 >= 1")
        elif self.kind == "pointwise":
            if self.r is None or self.r < 1:
                raise ValueError("pointwise RankChoice needs r >= 1")
        else:
            raise ValueError(f"unknown RankChoice kind {self.kind!r}")


def select_ranks(spec: ConvSpec) -> RankChoice | None:
    """Rank heuristic; None when the layer is too narrow to decompose.

    Applies only when min(C, S) >= 128.  Spatial kernels use R2 = 16 and
    R1 = C / (4 * R2) rounded to the nearest integer (>= 1); 1x1 kernels
    use R = 16.
    """
    c, s = spec.in_channels, spec.out_channels
    if min(c, s) < MIN_CHANNELS:
        return None
    if spec.kernel >= 2:
        r1 = max(1, round(c / (4 * SPATIAL_R2)))
        return RankChoice("spatial", r1=r1, r2=SPATIAL_R2)
    return RankChoice("pointwise", r=POINTWISE_R)


@dataclass(frozen=True)
class TTConvFactors:
    """Three-core factorization of a spatial kernel."""

    g1: np.ndarray  # (l, l, R1)
    g2: np.ndarray  # (R1, C, R2)
    g3: np.ndarray  # (R2, S)
    spec: ConvSpec
    bias: np.ndarray | None = None

    def __post_init__(self):
        l, c, s = self.spec.kernel, self.spec.in_channels, self.spec.out_channels
        r1, r2 = self.g1.shape[2], self.g2.shape[2]
        if self.g1.shape != (l, l, r1) or self.g2.shape != (r1, c, r2) \
                or self.g3.shape != (r2, s):
            raise ValueError("core shapes inconsistent with spec")
        for g in (self.g1, self.g2, self.g3):
            if not np.all(np.isfinite(g)):
                raise ValueError("non-finite core entries")
        if self.bias is not None and self.bias.shape != (s,):
            raise ValueError("bias length must equal out_channels")

    @property
    def r1(self) -> int:
        return self.g1.shape[2]

    @property
    def r2(self) -> int:
        return self.g2.shape[2]


@dataclass(frozen=True)
class LowRankFactors:
    """Two-factor decomposition of a 1x1 kernel."""

    g1: np.ndarray  # (C, R)
    g2: np.ndarray  # (R, S)
    spec: ConvSpec
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.spec.kernel != 1:
            raise ValueError("LowRankFactors only applies to 1x1 convolutions")
        c, s = self.spec.in_channels, self.spec.out_channels
        r = self.g1.shape[1]
        if self.g1.shape != (c, r) or self.g2.shape != (r, s):
            raise ValueError("factor shapes inconsistent with spec")
        if self.bias is not None and self.bias.shape != (s,):
            raise ValueError("bias length must equal out_channels")

    @property
    def r(self) -> int:
        return self.g1.shape[1]


def factorize_kernel(weight: np.ndarray, ranks: RankChoice,
                     spec: ConvSpec | None = None,
                     bias: np.ndarray | None = None):
    """Decompose a dense (S, C, l, l) kernel at the given ranks.

    Requested ranks exceeding the full unfolding rank are silently capped;
    the returned factors reflect the cap.
    """
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"expected (S, C, l, l) weight, got {w.shape}")
    s, c, l, _ = w.shape
    if spec is None:
        spec = ConvSpec(c, s, l, stride=1, padding=l // 2, has_bias=bias is not None)
    if (spec.out_channels, spec.in_channels, spec.kernel) != (s, c, l):
        raise ValueError("weight shape does not match spec")

    if ranks.kind == "spatial":
        if l < 2:
            raise ValueError("spatial ranks require kernel >= 2")
        # Modes: combined (i, j), then input channel, then output channel.
        t = w.transpose(2, 3, 1, 0).reshape(l * l, c, s)
        tt = tt_svd(t, max_ranks=(ranks.r1, ranks.r2))
        g1 = tt.cores[0][0].reshape(l, l, -1)
        g2 = tt.cores[1]
        g3 = tt.cores[2][:, :, 0]
        return TTConvFactors(g1, g2, g3, spec, bias)

    if l != 1:
        raise ValueError("pointwise ranks require a 1x1 kernel")
    m = w.reshape(s, c).T  # (C, S)
    u, sv, v = svd(m)
    r = min(ranks.r, int(np.count_nonzero(sv > (sv[0] * 1e-14 if sv.size else 0))))
    r = max(r, 1)
    root = np.sqrt(sv[:r])
    g1 = u[:, :r] * root[None, :]
    g2 = root[:, None] * v[:, :r].T
    return LowRankFactors(g1, g2, spec, bias)


def reconstruct_kernel(factors) -> np.ndarray:
    """Dense (S, C, l, l) kernel implied by the factors."""
    if isinstance(factors, TTConvFactors):
        return np.einsum("ijr,rcq,qs->scij", factors.g1, factors.g2, factors.g3)
    l = factors.spec.kernel
    return (factors.g1 @ factors.g2).T.reshape(
        factors.spec.out_channels, factors.spec.in_channels, l, l)


@dataclass(frozen=True)
class ConvStage:
    """One convolution of an execution plan."""

    weight: np.ndarray  # (S, C/groups, l, l), or (C/groups, l, l) if shared
    stride: int
    padding: int
    groups: int = 1
    shared_kernel: bool = False
    bias: np.ndarray | None = None

    @property
    def param_count(self) -> int:
        n = self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass(frozen=True)
class ThreeConvPlan:
    """Executable lowering of factorized kernels.

    Spatial case: pointwise C -> R1*R2, shared-kernel group conv (groups=R2)
    carrying the original stride/padding, pointwise R2 -> S with the bias.
    Stage-1 channel (r1, r2) lands at flat index r2*R1 + r1, so group r2
    consumes the contiguous block [r2*R1, (r2+1)*R1).

    Pointwise case: two pointwise convs; the stride rides on the first.
    """

    stages: tuple
    spec: ConvSpec

    @property
    def param_count(self) -> int:
        return sum(st.param_count for st in self.stages)


def lower(factors) -> ThreeConvPlan:
    spec = factors.spec
    if isinstance(factors, TTConvFactors):
        r1, r2 = factors.r1, factors.r2
        c, s, l = spec.in_channels, spec.out_channels, spec.kernel
        # W1[r2*R1 + r1, c] = G2[r1, c, r2]
        w1 = factors.g2.transpose(2, 0, 1).reshape(r2 * r1, c, 1, 1)
        # Shared kernel K2[r1, i, j] = G1[i, j, r1]
        k2 = factors.g1.transpose(2, 0, 1)
        # W3[s, r2] = G3[r2, s]
        w3 = factors.g3.T.reshape(s, r2, 1, 1)
        stages = (
            ConvStage(w1, stride=1, padding=0),
            ConvStage(k2, stride=spec.stride, padding=spec.padding,
                      groups=r2, shared_kernel=True),
            ConvStage(w3, stride=1, padding=0, bias=factors.bias),
        )
        return ThreeConvPlan(stages, spec)

    c, s = spec.in_channels, spec.out_channels
    r = factors.r
    w1 = factors.g1.T.reshape(r, c, 1, 1)
    w2 = factors.g2.T.reshape(s, r, 1, 1)
    stages = (
        ConvStage(w1, stride=spec.stride, padding=spec.padding),
        ConvStage(w2, stride=1, padding=0, bias=factors.bias),
    )
    return ThreeConvPlan(stages, spec)


def apply_plan(plan: ThreeConvPlan, x: np.ndarray) -> np.ndarray:
    """Run the plan's convolutions in sequence."""
    out = x
    for st in plan.stages:
        out = ops.conv2d(out, st.weight, st.bias, stride=st.stride,
                         padding=st.padding, groups=st.groups,
                         shared_kernel=st.shared_kernel)
    return out
