"""Frozen multi-stream backbone: one vision encoder per modality plus a shared text encoder.

The weights are seeded random stand-ins for pre-trained ones; every tensor
created here is frozen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .modality import MODAL_WORDS, MODALITIES, VOCAB, check_modality, prompt_sentence, text_length, tokenize, word_id
from .numerics import (
    Block, Module, Tensor, broadcast_to, concat, layer_norm, linear, mhsa_block, no_grad, parameter,
    reshape, split,
)
from .prompts import assemble_sequence


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    d_v: int = 32
    d_t: int = 32
    d_e: int = 32
    heads: int = 4
    image_size: int = 8
    patch_size: int = 4
    channels: int = 1
    mlp_ratio: int = 2
    text_object: str = "person"

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigurationError("encoder needs at least one layer")
        if self.image_size % self.patch_size:
            raise ConfigurationError(f"image size {self.image_size} is not a multiple of patch {self.patch_size}")
        for width in (self.d_v, self.d_t):
            if width % self.heads:
                raise ConfigurationError(f"width {width} is not divisible by {self.heads} heads")

    @property
    def grid(self) -> int:
        """Patches per image side."""
        return self.image_size // self.patch_size

    @property
    def T_v(self) -> int:
        return self.grid**2

    @property
    def T_t(self) -> int:
        return text_length(self.text_object)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, T_v, patch*patch*C), patches in row-major order."""
    b, h, w, c = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, g_h, patch, g_w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g_h * g_w, patch * patch * c)


class VisionEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_v
        self.patch_w = parameter(rng.normal(0.0, 1.0 / math.sqrt(cfg.patch_dim), (cfg.patch_dim, d)), frozen=True)
        self.patch_b = parameter(rng.normal(0.0, 0.02, d), frozen=True)
        self.pos = parameter(rng.normal(0.0, 0.1, (cfg.T_v, d)), frozen=True)
        self.cls = parameter(rng.normal(0.0, 1.0 / math.sqrt(d), d), frozen=True)
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, frozen=True) for _ in range(cfg.layers)]
        self.proj_w = parameter(rng.normal(0.0, 1.0 / math.sqrt(d), (d, cfg.d_e)), frozen=True)
        self.proj_b = parameter(np.zeros(cfg.d_e), frozen=True)


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        d = cfg.d_t
        self.tok_embed = parameter(rng.normal(0.0, 1.0, (len(VOCAB), d)), frozen=True)
        self.pos = parameter(rng.normal(0.0, 0.1, (cfg.T_t, d)), frozen=True)
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, frozen=True) for _ in range(cfg.layers)]
        self.ln_g = parameter(np.ones(d), frozen=True)
        self.ln_b = parameter(np.zeros(d), frozen=True)
        self.proj_w = parameter(rng.normal(0.0, 1.0 / math.sqrt(d), (d, cfg.d_e)), frozen=True)
        self.proj_b = parameter(np.zeros(cfg.d_e), frozen=True)


class Backbone(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.vision = {m: VisionEncoder(cfg, rng) for m in MODALITIES}
        self.text = TextEncoder(cfg, rng)
        self._text_cache: dict[str, Tensor] = {}

    @property
    def cfg(self) -> EncoderConfig:
        return self._cfg

    def word_embedding(self, modality: str) -> np.ndarray:
        return self.text.tok_embed.data[word_id(MODAL_WORDS[check_modality(modality)])].copy()

    def patch_embed(self, images: np.ndarray, modality: str) -> Tensor:
        """Frozen linear patch projection plus positional table; (B,H,W,C) -> (B,T_v,d_v)."""
        enc = self.vision[check_modality(modality)]
        cfg = self._cfg
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.shape[1:] != expected:
            raise DimensionError(f"image shape {images.shape[1:]} does not match configured {expected}")
        patches = Tensor(patchify(images, cfg.patch_size))
        return linear(patches, enc.patch_w, enc.patch_b) + enc.pos

    def encode_vision(self, modality: str, patches: Tensor,
                      prompts_per_layer: list[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Deep-prompted forward pass.

        Layer ``l`` sees ``[c, M_l, S_l, E]``; its outputs at the prompt rows
        are dropped and the layer-(l+1) prompts take their place. The last
        layer's prompt outputs are returned. Result shapes: (B, d_v),
        (B, M, d_v), (B, S, d_v), (B, T_v, d_v).
        """
        enc = self.vision[check_modality(modality)]
        if len(prompts_per_layer) != len(enc.blocks):
            raise ConfigurationError(
                f"got {len(prompts_per_layer)} prompt layers for a {len(enc.blocks)}-layer encoder"
            )
        b, _, d = patches.shape
        c = broadcast_to(reshape(enc.cls, (1, 1, d)), (b, 1, d))
        e = patches
        for block, (modal, semantic) in zip(enc.blocks, prompts_per_layer):
            seq = assemble_sequence(
                c,
                broadcast_to(modal.reshape(1, *modal.shape), (b, *modal.shape)),
                broadcast_to(semantic.reshape(1, *semantic.shape), (b, *semantic.shape)),
                e,
            )
            seq.tokens = mhsa_block(seq.tokens, block)
            c, modal_out, semantic_out, e = seq.disassemble()
        return reshape(c, (b, d)), modal_out, semantic_out, e

    def encode_plain(self, modality: str, patches: Tensor) -> tuple[Tensor, Tensor]:
        """Prompt-free forward over ``[c, E]``."""
        enc = self.vision[check_modality(modality)]
        b, t, d = patches.shape
        c = broadcast_to(reshape(enc.cls, (1, 1, d)), (b, 1, d))
        e = patches
        for block in enc.blocks:
            c, e = split(mhsa_block(concat([c, e], axis=1), block), [1, t], axis=1)
        return reshape(c, (b, d)), e

    def encode_text(self, modality: str) -> Tensor:
        """Fixed sentence -> frozen text encoder -> TextProj; cached per modality."""
        check_modality(modality)
        if modality not in self._text_cache:
            enc = self.text
            ids = tokenize(prompt_sentence(modality, self._cfg.text_object))
            with no_grad():
                x = Tensor(enc.tok_embed.data[ids]) + enc.pos
                for block in enc.blocks:
                    x = mhsa_block(x, block)
                x = layer_norm(x, enc.ln_g, enc.ln_b, block.eps)
                self._text_cache[modality] = linear(x[len(ids) - 1], enc.proj_w, enc.proj_b)
        return self._text_cache[modality]

    def project_joint(self, modality: str, cls: Tensor) -> Tensor:
        enc = self.vision[check_modality(modality)]
        return linear(cls, enc.proj_w, enc.proj_b)
