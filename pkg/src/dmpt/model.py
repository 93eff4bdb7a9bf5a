"""The assembled prompt-tuned model and its parameter accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone
from .config import RunConfig
from .errors import InputError, IntegrityError
from .modality import MODALITIES, modality_index
from .numerics import Module, Tensor, concat, matmul, no_grad, parameter
from .objectives import BatchFeatures, JointPair, total_loss
from .promptibind import Branch, FeatureBundle, PromptIBind, interaction_stack
from .prompts import PromptBank


def _rng(seed: int, stream: str) -> np.random.Generator:
    tag = sum(ord(ch) << (8 * i) for i, ch in enumerate(stream[:6]))
    return np.random.default_rng([seed, tag])


class DMPT(Module):
    def __init__(self, cfg: RunConfig, num_ids: int):
        self._cfg = cfg
        self._num_ids = num_ids
        enc = cfg.encoder
        self.backbone = Backbone(enc, _rng(cfg.backbone_seed, "bbone"))
        self.prompts = PromptBank(
            S=cfg.S_eff, M=cfg.M_eff, layers=enc.layers, d_v=enc.d_v, d_t=enc.d_t,
            word_embeddings={m: self.backbone.word_embedding(m) for m in MODALITIES},
            rng=_rng(cfg.seed, "prompt"), shared_proj=cfg.shared_proj,
        )
        self.interaction = PromptIBind(cfg.k_eff, enc.d_v, enc.heads, enc.mlp_ratio, _rng(cfg.seed, "bind"))
        head_rng = _rng(cfg.seed, "head")
        self.head = parameter(head_rng.normal(0.0, 0.01, (len(MODALITIES) * enc.d_v, num_ids)))
        if cfg.use_text and cfg.anchors == "identity":
            self.text_offsets = {m: parameter(np.zeros((num_ids, enc.d_e))) for m in MODALITIES}
        else:
            self.text_offsets = {}

    @property
    def cfg(self) -> RunConfig:
        return self._cfg

    @property
    def num_ids(self) -> int:
        return self._num_ids

    # -- forward -----------------------------------------------------------
    def encode(self, images: dict[str, np.ndarray]) -> FeatureBundle:
        """Prompted encoder outputs for all three modalities (before interaction)."""
        missing = [m for m in MODALITIES if m not in images]
        if missing:
            raise InputError(f"sample is missing modalities {missing}")
        branches, joint, text = {}, {}, {}
        for m in MODALITIES:
            patches = self.backbone.patch_embed(images[m], m)
            cls, modal, semantic, tokens = self.backbone.encode_vision(m, patches, self.prompts.layer_prompts(m))
            branches[m] = Branch(cls, modal, semantic, tokens)
            joint[m] = self.backbone.project_joint(m, cls)
            text[m] = self.backbone.encode_text(m)
        return FeatureBundle(branches, joint, text)

    def forward(self, images: dict[str, np.ndarray]) -> tuple[FeatureBundle, Tensor]:
        bundle = interaction_stack(self.interaction, self.encode(images))
        features = concat([bundle.branches[m].cls for m in MODALITIES], axis=-1)
        return bundle, features

    def batch_features(self, images: dict[str, np.ndarray], labels: np.ndarray) -> BatchFeatures:
        bundle, features = self.forward(images)
        labels = np.asarray(labels, dtype=int)
        joint = {}
        if self._cfg.use_text:
            for m in MODALITIES:
                if self._cfg.anchors == "identity":
                    anchors = self.text_offsets[m] + bundle.text[m].reshape(1, -1)
                    targets = labels
                else:
                    anchors = concat([bundle.text[n].reshape(1, -1) for n in MODALITIES], axis=0)
                    targets = np.full(len(labels), modality_index(m))
                joint[m] = JointPair(bundle.joint[m], anchors, targets)
        return BatchFeatures(features, labels, matmul(features, self.head), joint)

    def loss(self, images: dict[str, np.ndarray], labels: np.ndarray) -> tuple[Tensor, dict[str, float]]:
        return total_loss(self.batch_features(images, labels), self._cfg.loss)

    def extract_features(self, images: dict[str, np.ndarray], batch_size: int = 64) -> np.ndarray:
        """Unit-normalised concatenation of the three post-interaction cls tokens."""
        n = len(next(iter(images.values())))
        out = []
        with no_grad():
            for start in range(0, n, batch_size):
                chunk = {m: images[m][start:start + batch_size] for m in MODALITIES if m in images}
                _, feats = self.forward(chunk)
                out.append(feats.data)
        feats = np.concatenate(out, axis=0) if out else np.zeros((0, 3 * self._cfg.d_v))
        return feats / np.linalg.norm(feats, axis=1, keepdims=True)


@dataclass
class Partition:
    trainable: list[str]
    frozen: list[str]
    n_trainable: int
    n_frozen: int

    @property
    def total(self) -> int:
        return self.n_trainable + self.n_frozen

    @property
    def ratio(self) -> float:
        return self.n_trainable / self.total if self.total else 0.0


def parameter_partition(model: Module) -> Partition:
    trainable, frozen, seen = [], [], {}
    n_t = n_f = 0
    for name, t in model.named_parameters():
        if id(t) in seen:
            if seen[id(t)] != t.frozen:
                raise IntegrityError(f"tensor {name} registered as both trainable and frozen")
            continue
        seen[id(t)] = t.frozen
        if t.frozen:
            frozen.append(name)
            n_f += t.size
        else:
            trainable.append(name)
            n_t += t.size
    overlap = set(trainable) & set(frozen)
    if overlap:
        raise IntegrityError(f"parameters in both sets: {sorted(overlap)}")
    return Partition(trainable, frozen, n_t, n_f)
