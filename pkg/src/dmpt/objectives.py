"""Training objective: smoothed CE + batch-hard triplet + center MAE + image-text contrastive."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericError, SamplingError
from .numerics import Tensor, absolute, clamp_min, log_softmax, matmul, sqrt

TERMS = ("ce", "tri", "mae", "con")


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    margin: float = 0.3
    label_smoothing: float = 0.1
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("temperature must be positive")
        if self.margin < 0:
            raise ConfigurationError("triplet margin must be nonnegative")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigurationError("label smoothing must lie in [0, 1)")


@dataclass
class JointPair:
    """Image features of one modality with their text anchors and target anchor rows."""

    z: Tensor
    anchors: Tensor
    targets: np.ndarray


@dataclass
class BatchFeatures:
    features: Tensor
    labels: np.ndarray
    logits: Tensor
    joint: dict[str, JointPair] = field(default_factory=dict)


def _unit_rows(x: Tensor, what: str) -> Tensor:
    norms = np.sqrt((x.data * x.data).sum(axis=-1))
    if np.any(norms == 0):
        raise NumericError(f"zero-norm {what} vector cannot be normalised")
    return x / sqrt((x * x).sum(axis=-1, keepdims=True))


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def contrastive_loss(z: Tensor, anchors: Tensor, targets, tau: float) -> Tensor:
    """InfoNCE over cosine similarities: mean_b -log softmax(cos(z_b, anchors)/tau)[target_b]."""
    targets = np.asarray(targets, dtype=int)
    if tau <= 0:
        raise ConfigurationError("temperature must be positive")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= anchors.shape[0]:
        raise IndexError(f"targets must index {anchors.shape[0]} anchors")
    logits = matmul(_unit_rows(z, "image"), _unit_rows(anchors, "anchor").T) * (1.0 / tau)
    logp = log_softmax(logits, axis=-1)
    return -(logp * _onehot(targets, anchors.shape[0])).sum() * (1.0 / len(targets))


def cross_entropy_smoothed(logits: Tensor, labels, eps: float) -> Tensor:
    labels = np.asarray(labels, dtype=int)
    b, n = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise IndexError(f"labels must lie in [0, {n})")
    target = (1.0 - eps) * _onehot(labels, n) + eps / n
    return -(log_softmax(logits, axis=-1) * target).sum() * (1.0 / b)


def pairwise_distances(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Euclidean distance matrix; squared distances are floored so sqrt stays differentiable."""
    b, d = x.shape
    diff = x.reshape(b, 1, d) - x.reshape(1, b, d)
    return sqrt(clamp_min((diff * diff).sum(axis=-1), floor))


def triplet_batch_hard(features: Tensor, labels, margin: float) -> Tensor:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(len(labels), dtype=bool)
    neg_mask = ~same
    for i, lab in enumerate(labels):
        if not pos_mask[i].any() or not neg_mask[i].any():
            kind = "positive" if not pos_mask[i].any() else "negative"
            raise SamplingError(f"identity {int(lab)} has an anchor without a {kind} in the batch")
    dist = pairwise_distances(features)
    # masked entries are pushed far below any real distance before the max
    big = 1e6 + float(dist.data.max())
    hardest_pos = (dist * pos_mask - big * ~pos_mask).max(axis=1)
    hardest_neg = -(-dist * neg_mask - big * ~neg_mask).max(axis=1)
    hinge = clamp_min(hardest_pos - hardest_neg + margin, 0.0)
    return hinge.mean()


def center_mae(features: Tensor, labels) -> Tensor:
    labels = np.asarray(labels)
    ids, inverse = np.unique(labels, return_inverse=True)
    assign = _onehot(inverse, len(ids))  # B x I
    centers = matmul(Tensor((assign / assign.sum(axis=0)).T), features)  # I x D
    per_sample = matmul(Tensor(assign), centers)
    return absolute(features - per_sample).mean()


def total_loss(batch: BatchFeatures, cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the four terms; terms with weight zero are still reported."""
    w_ce, w_tri, w_mae, w_con = cfg.weights
    terms = {
        "ce": cross_entropy_smoothed(batch.logits, batch.labels, cfg.label_smoothing),
        "tri": triplet_batch_hard(batch.features, batch.labels, cfg.margin),
        "mae": center_mae(batch.features, batch.labels),
    }
    con = None
    for pair in batch.joint.values():
        term = contrastive_loss(pair.z, pair.anchors, pair.targets, cfg.tau)
        con = term if con is None else con + term
    terms["con"] = con if con is not None else Tensor(0.0)
    total = terms["ce"] * w_ce + terms["tri"] * w_tri + terms["mae"] * w_mae + terms["con"] * w_con
    return total, {name: terms[name].item() for name in TERMS}
