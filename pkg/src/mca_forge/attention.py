"""Paired-branch attention with key/value interaction policies.

Each branch keeps its own queries; the keys and values it attends over are
chosen by a variant:

    self        K_b,           V_b
    concat_k    [K_b; K_o],    [V_b; V_b]   (or [V_b; 0] in "damp" mode)
    concat_kv   [K_b; K_o],    [V_b; V_o]
    swap_k      K_o,           V_b
    swap_kv     K_o,           V_o

where ``o`` is the opposite branch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, PolicyError, ShapeError
from .tensor import Tensor


class BranchRole(str, enum.Enum):
    SRC = "src"
    TAR = "tar"

    @property
    def opposite(self) -> "BranchRole":
        return BranchRole.TAR if self is BranchRole.SRC else BranchRole.SRC


class McaVariant(str, enum.Enum):
    SELF = "self"
    CONCAT_K = "concat_k"
    CONCAT_KV = "concat_kv"
    SWAP_K = "swap_k"
    SWAP_KV = "swap_kv"

    @property
    def is_swap(self) -> bool:
        return self in (McaVariant.SWAP_K, McaVariant.SWAP_KV)

    @property
    def uses_other(self) -> bool:
        return self is not McaVariant.SELF


CONCAT_K_MODES = ("duplicate", "damp")


@dataclass(frozen=True)
class BranchState:
    role: BranchRole
    q: Tensor
    k: Tensor
    v: Tensor
    layer: int = 0
    step: int = 0

    def __post_init__(self):
        shapes = {self.q.shape, self.k.shape, self.v.shape}
        if len(shapes) != 1 or self.q.ndim != 2:
            raise ShapeError(f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")

    @property
    def tokens(self) -> int:
        return self.q.shape[0]

    @property
    def dim(self) -> int:
        return self.q.shape[1]


def resolve_context(
    variant: McaVariant, own: BranchState, other: BranchState, concat_k_mode: str = "duplicate"
) -> tuple[Tensor, Tensor]:
    variant = McaVariant(variant)
    if variant is McaVariant.SELF:
        return own.k, own.v
    if own.dim != other.dim:
        raise PolicyError(f"{variant.value}: head dims differ ({own.dim} vs {other.dim})")
    if variant.is_swap and own.tokens != other.tokens:
        raise PolicyError(f"{variant.value}: token counts differ ({own.tokens} vs {other.tokens})")

    if variant is McaVariant.CONCAT_K:
        kbar = T.concat_rows(own.k, other.k)
        if concat_k_mode == "duplicate":
            if own.tokens != other.tokens:
                raise PolicyError("concat_k: index-aligned values need equal token counts")
            return kbar, T.concat_rows(own.v, own.v)
        if concat_k_mode == "damp":
            pad = Tensor.zeros(other.tokens, own.dim, dtype=own.v.dtype)
            return kbar, T.concat_rows(own.v, pad)
        raise ConfigError(f"unknown concat_k mode {concat_k_mode!r}")
    if variant is McaVariant.CONCAT_KV:
        return T.concat_rows(own.k, other.k), T.concat_rows(own.v, other.v)
    if variant is McaVariant.SWAP_K:
        return other.k, own.v
    return other.k, other.v


def mca_weights(own: BranchState, other: BranchState, variant: McaVariant, concat_k_mode="duplicate") -> Tensor:
    kbar, _ = resolve_context(variant, own, other, concat_k_mode)
    return T.attention_weights(own.q, kbar)


def mca_attention(own: BranchState, other: BranchState, variant: McaVariant, concat_k_mode="duplicate") -> Tensor:
    kbar, vbar = resolve_context(variant, own, other, concat_k_mode)
    return T.scaled_dot_product_attention(own.q, kbar, vbar)


# --------------------------------------------------------------------------
# multi-head


@dataclass(frozen=True)
class AttentionWeights:
    """Projections for one attention layer; matrices are [width, width]."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    heads: int

    def __post_init__(self):
        width = self.wq.shape[0]
        if self.heads < 1 or width % self.heads:
            raise ConfigError(f"width {width} not divisible by {self.heads} heads")

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def random(cls, width: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionWeights":
        if heads < 1 or width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        bound = 1.0 / np.sqrt(width)

        def mat():
            return Tensor(rng.uniform(-bound, bound, (width, width)), dtype=dtype)

        def vec():
            return Tensor(rng.uniform(-bound, bound, width), dtype=dtype)

        return cls(mat(), mat(), mat(), mat(), vec(), vec(), vec(), vec(), heads)


def project_qkv(x: Tensor, w: AttentionWeights) -> tuple[Tensor, Tensor, Tensor]:
    return x @ w.wq + w.bq, x @ w.wk + w.bk, x @ w.wv + w.bv


def split_heads(m: Tensor, heads: int) -> list[Tensor]:
    dh = m.shape[1] // heads
    return [T.slice_cols(m, h * dh, (h + 1) * dh) for h in range(heads)]


def multi_head_mca(
    src_x: Tensor,
    tar_x: Tensor,
    weights: AttentionWeights,
    variants: Mapping[BranchRole, McaVariant] | tuple[McaVariant, McaVariant],
    layer: int = 0,
    step: int = 0,
    concat_k_mode: str = "duplicate",
) -> tuple[Tensor, Tensor]:
    """Joint attention for both branches of one layer.

    ``variants`` is either ``(src_variant, tar_variant)`` or a role mapping.
    """
    if not isinstance(variants, Mapping):
        variants = {BranchRole.SRC: variants[0], BranchRole.TAR: variants[1]}
    xs = {BranchRole.SRC: src_x, BranchRole.TAR: tar_x}
    heads = weights.heads
    per_head: dict[BranchRole, list[BranchState]] = {}
    for role in (BranchRole.SRC, BranchRole.TAR):
        q, k, v = project_qkv(xs[role], weights)
        per_head[role] = [
            BranchState(role, qh, kh, vh, layer, step)
            for qh, kh, vh in zip(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
        ]
    outs = []
    for role in (BranchRole.SRC, BranchRole.TAR):
        variant = McaVariant(variants[role])
        own, other = per_head[role], per_head[role.opposite]
        heads_out = [mca_attention(own[h], other[h], variant, concat_k_mode) for h in range(heads)]
        outs.append(T.concat_cols(heads_out) @ weights.wo + weights.bo)
    return outs[0], outs[1]


def multi_head_attention(x: Tensor, weights: AttentionWeights) -> Tensor:
    """Standard multi-head self-attention for a single branch."""
    q, k, v = project_qkv(x, weights)
    heads = weights.heads
    outs = [
        T.scaled_dot_product_attention(qh, kh, vh)
        for qh, kh, vh in zip(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    ]
    return T.concat_cols(outs) @ weights.wo + weights.bo
