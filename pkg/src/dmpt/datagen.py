"""Synthetic tri-modal identity corpus, its binary file format, and the PK sampler.

Each identity owns a random signature pattern shared by all three
modalities, plus one code per modality drawn from a small per-modality
codebook. The code triple is unique per identity while a single code is
shared by many identities, so at ``rho = 1`` an identity can only be told
apart by combining modalities. A sample grid is::

    (1 - rho) * signature + rho * codebook[m][code_m] + noise_sigma * N(0, 1)

File layout (``DMPTDS1``): one UTF-8 header line of space-separated
``key=value`` fields after the magic, then little-endian float32 grids,
sample-major, modality order RGB, NIR, TIR, each grid row-major
(image_size x image_size x 1). Samples are stored split by split
(train, query, gallery), identity-major within a split; sample ids are the
storage positions.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, LengthError, SamplingError
from .modality import MODALITIES

MAGIC = "DMPTDS1"
SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class CorpusSpec:
    num_ids: int = 16
    samples_per_id: int = 8
    query_per_id: int = 1
    gallery_per_id: int = 2
    image_size: int = 8
    noise_sigma: float = 0.4
    rho: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigurationError(f"rho must lie in [0, 1], got {self.rho}")
        if self.num_ids < 1 or self.image_size < 1 or self.noise_sigma < 0:
            raise ConfigurationError("num_ids and image_size must be positive, noise_sigma nonnegative")
        if self.train_per_id < 2:
            raise ConfigurationError("at least two training samples per identity are needed for triplets")

    @property
    def train_per_id(self) -> int:
        return self.samples_per_id - self.query_per_id - self.gallery_per_id

    @property
    def codebook_size(self) -> int:
        q = 2
        while q**3 < self.num_ids:
            q += 1
        return q


@dataclass
class Split:
    images: np.ndarray  # (n, 3, H, W, 1) float32
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def modality_images(self, index=slice(None)) -> dict[str, np.ndarray]:
        return {m: self.images[index, i] for i, m in enumerate(MODALITIES)}


@dataclass
class Corpus:
    spec: CorpusSpec
    train: Split
    query: Split
    gallery: Split

    def split(self, name: str) -> Split:
        return getattr(self, name)

    def all_images(self) -> np.ndarray:
        return np.concatenate([self.split(s).images for s in SPLITS], axis=0)


def identity_codes(num_ids: int, q: int) -> np.ndarray:
    """Base-q digits of each identity index, one digit per modality."""
    i = np.arange(num_ids)
    return np.stack([i % q, (i // q) % q, (i // (q * q)) % q], axis=1)


def _layout(spec: CorpusSpec) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    per = {"train": spec.train_per_id, "query": spec.query_per_id, "gallery": spec.gallery_per_id}
    out, start = {}, 0
    for name in SPLITS:
        labels = np.repeat(np.arange(spec.num_ids), per[name])
        out[name] = (labels, np.arange(start, start + len(labels)))
        start += len(labels)
    return out


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    g = spec.image_size
    signatures = rng.normal(0.0, 1.0, (spec.num_ids, g, g))
    q = spec.codebook_size
    codebook = rng.normal(0.0, 1.0, (len(MODALITIES), q, g, g))
    codes = identity_codes(spec.num_ids, q)
    clean = np.stack(
        [(1.0 - spec.rho) * signatures + spec.rho * codebook[m][codes[:, m]] for m in range(len(MODALITIES))],
        axis=1,
    )  # (num_ids, 3, g, g)
    splits = {}
    for name, (labels, ids) in _layout(spec).items():
        noise = rng.normal(0.0, 1.0, (len(labels), len(MODALITIES), g, g))
        grids = clean[labels] + spec.noise_sigma * noise
        splits[name] = Split(grids[..., None].astype(np.float32), labels, ids)
    return Corpus(spec, **splits)


def _header(spec: CorpusSpec) -> str:
    counts = {"n_" + s: n for s, n in zip(SPLITS, (spec.train_per_id, spec.query_per_id, spec.gallery_per_id))}
    parts = [MAGIC] + [f"{k}={v!r}" for k, v in asdict(spec).items()]
    parts += [f"{k}={v * spec.num_ids}" for k, v in counts.items()]
    return " ".join(parts) + "\n"


def write_corpus(corpus: Corpus, path: str | os.PathLike) -> None:
    payload = corpus.all_images().astype("<f4", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(_header(corpus.spec).encode("utf-8"))
        fh.write(payload)


def read_corpus(path: str | os.PathLike) -> Corpus:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FormatError(f"{path}: no header line")
    try:
        fields_ = raw[:newline].decode("utf-8").split()
    except UnicodeDecodeError:
        raise FormatError(f"{path}: header is not UTF-8") from None
    if not fields_ or fields_[0] != MAGIC:
        raise FormatError(f"{path}: bad magic {fields_[0] if fields_ else ''!r}, expected {MAGIC}")
    kv = dict(f.split("=", 1) for f in fields_[1:] if "=" in f)
    types = {f.name: f.type for f in fields(CorpusSpec)}
    try:
        spec = CorpusSpec(**{k: (float(kv[k]) if types[k] == "float" else int(kv[k])) for k in types})
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header field {exc}") from None
    layout = _layout(spec)
    n = sum(len(labels) for labels, _ in layout.values())
    for s in SPLITS:
        if int(kv.get("n_" + s, -1)) != len(layout[s][0]):
            raise FormatError(f"{path}: header count n_{s}={kv.get('n_' + s)} disagrees with the generator fields")
    g = spec.image_size
    expected = n * len(MODALITIES) * g * g * 4
    payload = raw[newline + 1:]
    if len(payload) != expected:
        raise LengthError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    images = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(n, len(MODALITIES), g, g, 1)
    splits, start = {}, 0
    for name in SPLITS:
        labels, ids = layout[name]
        splits[name] = Split(images[start:start + len(labels)].copy(), labels, ids)
        start += len(labels)
    return Corpus(spec, **splits)


class PKSampler:
    """Identity-balanced batches: P identities x K instances each.

    Within an epoch no sample is drawn twice; the epoch ends when fewer than
    P identities still hold K unused samples. The sampler is a pure function
    of ``(seed, position)``, so ``position`` is its entire resumable state.
    """

    def __init__(self, labels: np.ndarray, P: int, K: int, seed: int, position: int = 0):
        self.labels = np.asarray(labels)
        self.P, self.K, self.seed = P, K, seed
        self.position = position
        ids, counts = np.unique(self.labels, return_counts=True)
        eligible = ids[counts >= K]
        if len(eligible) < P:
            raise SamplingError(
                f"need {P} identities with at least {K} samples, only {len(eligible)} qualify"
            )
        self._epochs: list[list[np.ndarray]] = []

    def _epoch(self, e: int) -> list[np.ndarray]:
        while len(self._epochs) <= e:
            self._epochs.append(self._build_epoch(len(self._epochs)))
        return self._epochs[e]

    def _build_epoch(self, e: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, e])
        chunks: dict[int, list[np.ndarray]] = {}
        for ident in np.unique(self.labels):
            idx = rng.permutation(np.flatnonzero(self.labels == ident))
            n_full = len(idx) // self.K
            chunks[int(ident)] = [idx[j * self.K:(j + 1) * self.K] for j in range(n_full)]
        batches = []
        while True:
            ready = sorted(i for i, c in chunks.items() if c)
            if len(ready) < self.P:
                break
            weights = np.array([len(chunks[i]) for i in ready], dtype=float)
            chosen = rng.choice(ready, size=self.P, replace=False, p=weights / weights.sum())
            batches.append(np.concatenate([chunks[int(i)].pop() for i in chosen]))
        return batches

    def batch_at(self, position: int) -> tuple[int, np.ndarray]:
        """(epoch, sample indices) of the ``position``-th batch overall."""
        e = 0
        while position >= len(self._epoch(e)):
            position -= len(self._epoch(e))
            e += 1
        return e, self._epoch(e)[position]

    def next(self) -> np.ndarray:
        _, idx = self.batch_at(self.position)
        self.position += 1
        return idx

    def epoch_of(self, position: int) -> int:
        return self.batch_at(position)[0]


def sample_batch(split: Split, sampler: PKSampler) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    idx = sampler.next()
    return split.modality_images(idx), split.labels[idx], split.ids[idx]
