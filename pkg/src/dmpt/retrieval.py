"""Ranking, average precision, CMC and the query/gallery protocol."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DimensionError, ProtocolError

RANKS = (1, 5, 10)


@dataclass
class RetrievalIndex:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        self.ids = np.asarray(self.ids)
        norms = np.linalg.norm(self.features, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-9:
            raise DimensionError("gallery features must be unit-normalised")
        if np.any(self.labels < 0):
            raise ProtocolError("labels must be nonnegative")


@dataclass
class QueryResult:
    ranking: np.ndarray
    relevance: np.ndarray
    ap: Fraction | None


def rank_gallery(query: np.ndarray, index: RetrievalIndex) -> np.ndarray:
    """Gallery rows by descending cosine similarity, ties by ascending sample id."""
    if len(index.labels) == 0:
        raise ProtocolError("cannot rank against an empty gallery")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != index.features.shape[1:]:
        raise DimensionError(f"query dim {query.shape} vs gallery dim {index.features.shape[1:]}")
    sims = index.features @ query
    return np.lexsort((index.ids, -sims))


def exact_average_precision(relevance) -> Fraction:
    """Mean over hit positions r_i of (hits within top r_i) / r_i, as an exact rational."""
    hits = np.flatnonzero(np.asarray(relevance, dtype=bool))
    if len(hits) == 0:
        raise ValueError("average precision is undefined without a relevant item")
    return sum((Fraction(j + 1, int(pos) + 1) for j, pos in enumerate(hits)), Fraction(0)) / len(hits)


def average_precision(relevance) -> float:
    """Correctly rounded AP; ``[1, 0, 1]`` gives exactly ``5/6``."""
    return float(exact_average_precision(relevance))


def cmc_at_k(relevances, k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    relevances = list(relevances)
    if not relevances:
        return 0.0
    found = sum(1 for rel in relevances if np.asarray(rel[:k], dtype=bool).any())
    return found / len(relevances)


def query(query_feature: np.ndarray, query_label: int, index: RetrievalIndex) -> QueryResult:
    ranking = rank_gallery(query_feature, index)
    relevance = index.labels[ranking] == query_label
    return QueryResult(ranking, relevance, exact_average_precision(relevance) if relevance.any() else None)


def evaluate_features(q_feats, q_labels, q_ids, g_feats, g_labels, g_ids, *, strict: bool = True) -> dict:
    """mAP and CMC Rank-1/5/10 for precomputed unit features.

    With ``strict`` the query identities must all appear in the gallery;
    otherwise such queries are skipped with a warning and counted.
    """
    q_labels, q_ids, g_ids = np.asarray(q_labels), np.asarray(q_ids), np.asarray(g_ids)
    overlap = set(q_ids.tolist()) & set(g_ids.tolist())
    if overlap:
        raise ProtocolError(f"query and gallery share sample ids {sorted(overlap)[:10]}")
    index = RetrievalIndex(g_feats, g_labels, g_ids)
    absent = sorted(set(q_labels.tolist()) - set(index.labels.tolist()))
    if absent and strict:
        raise ProtocolError(f"query identities absent from gallery: {absent}")
    aps, relevances, skipped = [], [], 0
    for feat, label in zip(np.asarray(q_feats, dtype=np.float64), q_labels):
        result = query(feat, label, index)
        if result.ap is None:
            skipped += 1
            continue
        aps.append(result.ap)
        relevances.append(result.relevance)
    if skipped:
        warnings.warn(f"{skipped} queries have no gallery match and were skipped")
    # exact rational mean, rounded once: independent of query order
    metrics = {"map": float(sum(aps, Fraction(0)) / len(aps)) if aps else 0.0}
    for k in RANKS:
        metrics[f"rank{k}"] = cmc_at_k(relevances, k)
    metrics["num_queries"] = len(aps)
    metrics["skipped"] = skipped
    return metrics


def evaluate(model, query_split, gallery_split) -> tuple[dict, np.ndarray, np.ndarray]:
    """Extract features for both splits with ``model`` and score them."""
    qf = model.extract_features(query_split.modality_images())
    gf = model.extract_features(gallery_split.modality_images())
    metrics = evaluate_features(qf, query_split.labels, query_split.ids, gf, gallery_split.labels, gallery_split.ids)
    return metrics, qf, gf


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=2) + "\n"


def write_features_csv(path, ids, labels, features) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "label"] + [f"f{i}" for i in range(features.shape[1])])
        for sid, lab, row in zip(ids, labels, features):
            writer.writerow([int(sid), int(lab)] + [repr(float(v)) for v in row])
