"""Decoupled visual prompts: modality prompts and semantic prompts.

Modality prompts are projected, layer by layer, from a trainable embedding
of the modality attribute word. Semantic prompts are free tokens per
modality and per layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .modality import MODALITIES, check_modality
from .numerics import Linear, Module, Tensor, concat, getitem, linear, parameter

SEGMENTS = ("cls", "modal", "semantic", "patches")


@dataclass
class TokenSequence:
    """Token block ``[cls | modality prompts | semantic prompts | patches]``.

    ``tokens`` has shape (..., T, d); ``segments`` maps each segment name to
    its half-open row range along the token axis.
    """

    tokens: Tensor
    segments: dict[str, tuple[int, int]]

    def block(self, name: str) -> Tensor:
        start, stop = self.segments[name]
        index = (Ellipsis, slice(start, stop), slice(None))
        return getitem(self.tokens, index)

    def disassemble(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return tuple(self.block(name) for name in SEGMENTS)


def assemble_sequence(cls: Tensor, modal: Tensor, semantic: Tensor, patches: Tensor) -> TokenSequence:
    parts = (cls, modal, semantic, patches)
    widths = {p.shape[-1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"token widths differ: {[p.shape for p in parts]}")
    if cls.shape[-2] != 1:
        raise DimensionError(f"cls segment must hold exactly one token, got {cls.shape}")
    segments, start = {}, 0
    for name, part in zip(SEGMENTS, parts):
        segments[name] = (start, start + part.shape[-2])
        start += part.shape[-2]
    return TokenSequence(concat(parts, axis=-2), segments)


def init_semantic_prompts(S: int, L: int, d_v: int, rng: np.random.Generator) -> dict[str, list[Tensor]]:
    """Uniform init in [-a, a], a = sqrt(6 / (S + d_v)), for every (modality, layer)."""
    bound = math.sqrt(6.0 / (S + d_v))
    return {
        m: [parameter(rng.uniform(-bound, bound, (S, d_v))) for _ in range(L)]
        for m in MODALITIES
    }


class PromptBank(Module):
    def __init__(self, *, S: int, M: int, layers: int, d_v: int, d_t: int,
                 word_embeddings: dict[str, np.ndarray], rng: np.random.Generator,
                 shared_proj: bool = False):
        self._S, self._M, self._layers, self._d_v = S, M, layers, d_v
        self._shared_proj = shared_proj
        self.semantic = init_semantic_prompts(S, layers, d_v, rng)
        if M > 0:
            self.modal_embed = {
                m: parameter(np.tile(np.asarray(word_embeddings[m], dtype=np.float64), (M, 1)))
                for m in MODALITIES
            }
            n_proj = 1 if shared_proj else layers
            self.proj = [Linear(d_t, d_v, rng) for _ in range(n_proj)]
        else:
            self.modal_embed = {}
            self.proj = []

    @property
    def S(self) -> int:
        return self._S

    @property
    def M(self) -> int:
        return self._M

    @property
    def layers(self) -> int:
        return self._layers

    def embed_modal_words(self, modality: str) -> Tensor:
        check_modality(modality)
        if self._M == 0:
            return Tensor(np.zeros((0, 0)))
        return self.modal_embed[modality]

    def project_modal_prompt(self, modality: str, layer: int) -> Tensor:
        check_modality(modality)
        if not 0 <= layer < self._layers:
            raise IndexError(f"layer {layer} outside [0, {self._layers})")
        if self._M == 0:
            return Tensor(np.zeros((0, self._d_v)))
        p = self.proj[0 if self._shared_proj else layer]
        return linear(self.modal_embed[modality], p.w, p.b)

    def semantic_prompt(self, modality: str, layer: int) -> Tensor:
        return self.semantic[check_modality(modality)][layer]

    def layer_prompts(self, modality: str) -> list[tuple[Tensor, Tensor]]:
        return [
            (self.project_modal_prompt(modality, l), self.semantic_prompt(modality, l))
            for l in range(self._layers)
        ]
