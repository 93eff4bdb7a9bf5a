"""Training loop, evaluation, ablation grids, parameter counting and gradient checks."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointData, frozen_checksum, load_checkpoint, save_checkpoint
from .config import RunConfig
from .datagen import Corpus, CorpusSpec, PKSampler, generate_corpus, read_corpus
from .errors import ConfigurationError, IntegrityError, NumericError
from .model import DMPT, Partition, parameter_partition
from .numerics import grad_check
from .retrieval import evaluate, metrics_json, write_features_csv

log = logging.getLogger("dmpt")


class Adam:
    """Adam with L2 weight decay folded into the gradient.

    Decay applies to matrices only (prompt blocks, projection and attention
    weights); bias vectors and norm gains are not decayed. Tensors without a
    gradient in a step are left untouched, frozen tensors are never
    registered.
    """

    def __init__(self, named_params, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [(n, t) for n, t in named_params if not t.frozen]
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.t = {n: 0 for n, _ in self.params}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for name, p in self.params:
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.ndim >= 2:
                g = g + self.weight_decay * p.data
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**t)
            v_hat = self.v[name] / (1 - b2**t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
            out[f"adam_t/{name}"] = np.array(float(self.t[name]))
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for name, _ in self.params:
            self.m[name] = tensors[f"adam_m/{name}"].copy()
            self.v[name] = tensors[f"adam_v/{name}"].copy()
            self.t[name] = int(tensors[f"adam_t/{name}"])


def warmup_lr(step: int, cfg: RunConfig) -> float:
    """Linear ramp from 0 to ``cfg.lr`` over the warm-up steps, then constant (step is 0-based)."""
    warm = max(1, round(cfg.warmup_frac * cfg.steps))
    return cfg.lr * min(1.0, (step + 1) / warm)


@dataclass
class TrainResult:
    model: DMPT
    optimizer: Adam
    step: int
    history: list[dict] = field(default_factory=list)
    checksum: str = ""


def _check_grid(cfg: RunConfig, corpus: Corpus) -> None:
    if corpus.spec.image_size != cfg.image_size:
        raise ConfigurationError(
            f"dataset images are {corpus.spec.image_size}px but the config expects {cfg.image_size}px"
        )


def _model_tensors(model: DMPT) -> dict[str, np.ndarray]:
    return {f"model/{n}": t.data for n, t in model.named_parameters()}


def make_checkpoint(result: TrainResult) -> CheckpointData:
    tensors = _model_tensors(result.model)
    tensors.update(result.optimizer.state())
    return CheckpointData(result.step, result.model.num_ids, result.model.cfg, tensors)


def restore_model(ckpt: CheckpointData) -> DMPT:
    model = DMPT(ckpt.config, ckpt.num_ids)
    for name, t in model.named_parameters():
        key = f"model/{name}"
        if key not in ckpt.tensors:
            raise IntegrityError(f"checkpoint lacks tensor {key}")
        if ckpt.tensors[key].shape != t.shape:
            raise IntegrityError(f"{key}: checkpoint shape {ckpt.tensors[key].shape} vs model {t.shape}")
        t.data[...] = ckpt.tensors[key]
    model.backbone._text_cache.clear()
    return model


def load_corpus(cfg: RunConfig) -> Corpus:
    if not cfg.data:
        raise ConfigurationError("no dataset path configured (data=...)")
    return read_corpus(cfg.data)


def train(cfg: RunConfig, corpus: Corpus | None = None, *, resume: str | os.PathLike | None = None,
          stop_at: int | None = None, checkpoint_dir: str | os.PathLike | None = None) -> TrainResult:
    """Run (or resume) training.

    ``stop_at`` halts after that many total steps as if interrupted;
    ``checkpoint_dir`` receives ``step_<n>.ckpt`` every ``cfg.ckpt_every``
    steps and ``final.ckpt`` at the end.
    """
    corpus = corpus if corpus is not None else load_corpus(cfg)
    _check_grid(cfg, corpus)
    if checkpoint_dir:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        cfg = ckpt.config.with_overrides(steps=cfg.steps) if cfg.steps != ckpt.config.steps else ckpt.config
        model = restore_model(ckpt)
        start = ckpt.step
    else:
        model = DMPT(cfg, corpus.spec.num_ids)
        start = 0
    opt = Adam(model.trainable(), cfg.lr, cfg.weight_decay)
    if resume is not None:
        opt.load_state(ckpt.tensors)
    sampler = PKSampler(corpus.train.labels, cfg.P, cfg.K, cfg.seed)
    reference = frozen_checksum(model)
    result = TrainResult(model, opt, start, checksum=reference)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    epoch = sampler.epoch_of(start) if start < end else 0
    for step in range(start, end):
        e, idx = sampler.batch_at(step)
        if e != epoch:
            _assert_frozen(model, reference, step)
            epoch = e
        lr = warmup_lr(step, cfg)
        model.zero_grad()
        loss, terms = model.loss(corpus.train.modality_images(idx), corpus.train.labels[idx])
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite loss {loss.item()} at step {step + 1}")
        loss.backward()
        opt.step(lr)
        result.step = step + 1
        record = {"step": step + 1, "epoch": e, "lr": lr, "loss": loss.item(), **terms}
        result.history.append(record)
        if cfg.log_every and (step + 1) % cfg.log_every == 0 or step + 1 == end:
            log.info(" ".join(f"{k}={_fmt(v)}" for k, v in record.items()))
        if checkpoint_dir and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step_{step + 1}.ckpt", make_checkpoint(result))
    _assert_frozen(model, reference, result.step)
    if checkpoint_dir:
        save_checkpoint(Path(checkpoint_dir) / "final.ckpt", make_checkpoint(result))
    return result


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _assert_frozen(model: DMPT, reference: str, step: int) -> None:
    current = frozen_checksum(model)
    if current != reference:
        raise IntegrityError(f"frozen backbone checksum drifted at step {step}: {reference} -> {current}")


def evaluate_model(model: DMPT, corpus: Corpus, out_dir: str | os.PathLike | None = None) -> dict:
    _check_grid(model.cfg, corpus)
    metrics, qf, gf = evaluate(model, corpus.query, corpus.gallery)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(metrics_json(metrics), encoding="utf-8")
        write_features_csv(
            out / "features.csv",
            np.concatenate([corpus.query.ids, corpus.gallery.ids]),
            np.concatenate([corpus.query.labels, corpus.gallery.labels]),
            np.concatenate([qf, gf]),
        )
    return metrics


def evaluate_checkpoint(path: str | os.PathLike, corpus: Corpus, out_dir=None) -> dict:
    return evaluate_model(restore_model(load_checkpoint(path)), corpus, out_dir)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------
COMPONENT_ROWS = (
    ("(1)", dict(use_semantic=True, use_modality=False, use_bind=False, use_text=False)),
    ("(2)", dict(use_semantic=True, use_modality=False, use_bind=True, use_text=False)),
    ("(3)", dict(use_semantic=True, use_modality=True, use_bind=True, use_text=False)),
    ("(4)", dict(use_semantic=True, use_modality=True, use_bind=True, use_text=True)),
)
AXES = ("components", "k", "S", "M")


def parse_grid(spec: str) -> list[tuple[str, str, dict]]:
    """``components`` | ``k=0,1,2`` | ``S=0,8,32`` | ``M=0,1,2,3`` -> (axis, label, overrides) cells."""
    spec = spec.strip()
    if spec == "components":
        return [("components", label, dict(kw)) for label, kw in COMPONENT_ROWS]
    if "=" not in spec:
        raise ConfigurationError(f"bad grid spec {spec!r}")
    axis, values = spec.split("=", 1)
    axis = axis.strip()
    if axis not in AXES[1:]:
        raise ConfigurationError(f"grid axis {axis!r} not in {AXES}")
    vals = [int(v) for v in values.split(",") if v.strip()]
    if axis == "k" and any(v not in (0, 1, 2) for v in vals):
        raise ConfigurationError("k grid values must lie in {0, 1, 2}")
    if axis == "M" and any(v not in (0, 1, 2, 3) for v in vals):
        raise ConfigurationError("M grid values must lie in {0, 1, 2, 3}")
    return [(axis, str(v), {axis: v}) for v in vals]


@dataclass
class AblationRow:
    axis: str
    value: str
    config: RunConfig
    maps: list[float]
    rank1s: list[float]

    @staticmethod
    def _stats(xs):
        arr = np.asarray(xs, dtype=float)
        return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0

    @property
    def map_mean(self) -> float:
        return self._stats(self.maps)[0]

    @property
    def map_std(self) -> float:
        return self._stats(self.maps)[1]

    @property
    def rank1_mean(self) -> float:
        return self._stats(self.rank1s)[0]

    @property
    def rank1_std(self) -> float:
        return self._stats(self.rank1s)[1]


def ablate(cfg: RunConfig, grid: str, seeds, corpus: Corpus | None = None) -> list[AblationRow]:
    corpus = corpus if corpus is not None else load_corpus(cfg)
    rows = []
    for axis, label, overrides in parse_grid(grid):
        try:
            cell_cfg = cfg.with_overrides(**overrides)
        except ConfigurationError as exc:
            raise ConfigurationError(f"grid cell {axis}={label}: {exc}") from None
        maps, rank1s = [], []
        for seed in seeds:
            result = train(cell_cfg.with_overrides(seed=seed), corpus)
            metrics = evaluate_model(result.model, corpus)
            maps.append(metrics["map"])
            rank1s.append(metrics["rank1"])
            log.info(f"ablate axis={axis} value={label} seed={seed} map={metrics['map']!r}")
        rows.append(AblationRow(axis, label, cell_cfg, maps, rank1s))
    return rows


def ablation_csv(rows: list[AblationRow]) -> str:
    header = "axis,value,semantic,modality,bind,text,S,M,k,map_mean,map_std,rank1_mean,rank1_std,seeds"
    lines = [header]
    for r in rows:
        c = r.config
        flags = ["x" if f else "-" for f in (c.use_semantic, c.use_modality, c.use_bind, c.use_text)]
        lines.append(",".join([
            r.axis, r.value, *flags, str(c.S_eff), str(c.M_eff), str(c.k_eff),
            f"{r.map_mean:.4f}", f"{r.map_std:.4f}", f"{r.rank1_mean:.4f}", f"{r.rank1_std:.4f}", str(len(r.maps)),
        ]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# accounting and gradient checks
# ---------------------------------------------------------------------------
def count_params(cfg: RunConfig, num_ids: int) -> dict:
    part: Partition = parameter_partition(DMPT(cfg, num_ids))
    return {"trainable": part.n_trainable, "frozen": part.n_frozen, "ratio": part.ratio}


MICRO = dict(
    layers=1, d_v=8, d_t=8, d_e=8, heads=2, mlp_ratio=2, image_size=4, patch_size=2,
    S=2, M=1, k=1, P=2, K=2,
)


def micro_batch(cfg: RunConfig, seed: int = 0):
    spec = CorpusSpec(num_ids=cfg.P, samples_per_id=cfg.K + 3, query_per_id=1, gallery_per_id=2,
                      image_size=cfg.image_size, noise_sigma=0.3, rho=0.5, seed=seed)
    corpus = generate_corpus(spec)
    idx = np.concatenate([np.flatnonzero(corpus.train.labels == i)[:cfg.K] for i in range(cfg.P)])
    return corpus, corpus.train.modality_images(idx), corpus.train.labels[idx]


@dataclass
class GradCheckResult:
    max_error: float
    worst: tuple | None
    checked: int
    max_abs_grad: float
    names: list[str]


def gradcheck(cfg: RunConfig, *, jitter: float = 0.1, step: float = 1e-5) -> GradCheckResult:
    """Finite-difference check of the full loss over every trainable coordinate.

    Trainable tensors get a seeded perturbation first, so zero-initialised
    output projections do not hide any path.
    """
    corpus, images, labels = micro_batch(cfg, cfg.seed)
    model = DMPT(cfg, corpus.spec.num_ids)
    rng = np.random.default_rng([cfg.seed, 99])
    named = model.trainable()
    for _, t in named:
        t.data += jitter * rng.standard_normal(t.shape)
    report = grad_check(lambda: model.loss(images, labels)[0], named, step=step)
    return GradCheckResult(report.max_error, report.worst, report.checked, report.max_abs_grad,
                           [n for n, _ in named])
