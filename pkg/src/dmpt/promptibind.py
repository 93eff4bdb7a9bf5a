"""Prompt inverse-bind interaction.

A bind prompt is formed as the mean of the three projected semantic-prompt
blocks. Each modality's semantic prompts then query the bind prompt
(external interaction), and the updated prompts are propagated into the
modality's tokens by a self-attention block (internal interaction).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, IntegrityError
from .modality import MODALITIES
from .numerics import Block, Linear, Module, Tensor, linear, matmul, mhsa_block, reshape, softmax
from .prompts import assemble_sequence


@dataclass
class Branch:
    """Token groups of one modality: cls (B,d), modal (B,M,d), semantic (B,S,d), patches (B,T,d)."""

    cls: Tensor
    modal: Tensor
    semantic: Tensor
    patches: Tensor


@dataclass
class FeatureBundle:
    branches: dict[str, Branch]
    joint: dict[str, Tensor]  # z_m, image features in the vision-language space
    text: dict[str, Tensor]  # t_m

    def with_branches(self, branches: dict[str, Branch]) -> "FeatureBundle":
        return replace(self, branches=branches)


class InteractionLevel(Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self._width = width
        self.w_circ = {m: Linear(width, width, rng) for m in MODALITIES}
        self.w_b = Linear(width, width, rng)
        self.w_m = {m: Linear(width, width, rng) for m in MODALITIES}
        # zero output projections: each block starts as the identity map
        self.sa = {m: Block(width, heads, mlp_ratio, rng, frozen=False, zero_output=True) for m in MODALITIES}

    @staticmethod
    def count(width: int, mlp_ratio: int) -> int:
        lin = width * width + width
        return 3 * lin + lin + 3 * lin + 3 * Block.count(width, mlp_ratio)


class PromptIBind(Module):
    def __init__(self, depth: int, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.levels = [InteractionLevel(width, heads, mlp_ratio, rng) for _ in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.levels)


def compute_bind(level: InteractionLevel, semantic: dict[str, Tensor]) -> Tensor:
    shapes = {m: semantic[m].shape for m in MODALITIES}
    if len(set(shapes.values())) != 1:
        raise DimensionError(f"semantic prompt shapes disagree: {shapes}")
    projected = [linear(semantic[m], level.w_circ[m].w, level.w_circ[m].b) for m in MODALITIES]
    total = projected[0]
    for p in projected[1:]:
        total = total + p
    return total * (1.0 / len(MODALITIES))


def b2m_cross_attention(level: InteractionLevel, modality: str, bind: Tensor, semantic: Tensor) -> Tensor:
    """Single-head attention of the modality's prompts (queries) over the bind prompt."""
    if bind.shape[-1] != semantic.shape[-1]:
        raise DimensionError(f"bind width {bind.shape} vs semantic width {semantic.shape}")
    width = semantic.shape[-1]
    bind_p = linear(bind, level.w_b.w, level.w_b.b)
    sem_p = linear(semantic, level.w_m[modality].w, level.w_m[modality].b)
    weights = softmax(matmul(sem_p, bind_p.T) * (1.0 / math.sqrt(width)), axis=-1)
    return semantic + matmul(weights, bind_p)


def internal_interaction(level: InteractionLevel, modality: str, branch: Branch, coupled: Tensor) -> Branch:
    b, d = branch.cls.shape
    seq = assemble_sequence(reshape(branch.cls, (b, 1, d)), branch.modal, coupled, branch.patches)
    seq.tokens = mhsa_block(seq.tokens, level.sa[modality])
    cls, modal, semantic, patches = seq.disassemble()
    out = Branch(reshape(cls, (b, d)), modal, semantic, patches)
    for name, before, after in zip(("cls", "modal", "semantic", "patches"),
                                   (branch.cls, branch.modal, coupled, branch.patches),
                                   (out.cls, out.modal, out.semantic, out.patches)):
        if before.shape != after.shape:
            raise IntegrityError(f"segment {name} changed shape {before.shape} -> {after.shape}")
    return out


def interaction_level(level: InteractionLevel, branches: dict[str, Branch]) -> dict[str, Branch]:
    bind = compute_bind(level, {m: branches[m].semantic for m in MODALITIES})
    coupled = {m: b2m_cross_attention(level, m, bind, branches[m].semantic) for m in MODALITIES}
    return {m: internal_interaction(level, m, branches[m], coupled[m]) for m in MODALITIES}


def interaction_stack(stack: PromptIBind, bundle: FeatureBundle, k: int | None = None) -> FeatureBundle:
    """Apply the first ``k`` interaction levels (all of them by default)."""
    k = stack.depth if k is None else k
    if not 0 <= k <= stack.depth:
        raise IndexError(f"depth {k} outside [0, {stack.depth}]")
    branches = bundle.branches
    for level in stack.levels[:k]:
        branches = interaction_level(level, branches)
    return bundle.with_branches(branches)
