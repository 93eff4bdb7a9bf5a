"""End-to-end acceptance checks, one test per criterion, each logging a PASS/FAIL verdict."""
import math
import time

import numpy as np
import pytest

from conftest import VERDICTS
from oracles import brute_force, retrieval_fixture, trainable_terms

from dmpt.checkpoint import frozen_checksum, full_checksum
from dmpt.config import RunConfig
from dmpt.datagen import CorpusSpec, generate_corpus
from dmpt.harness import COMPONENT_ROWS, MICRO, count_params, evaluate_model, gradcheck, train
from dmpt.model import DMPT, parameter_partition
from dmpt.modality import MODALITIES
from dmpt.numerics import Tensor
from dmpt.objectives import (
    BatchFeatures, JointPair, LossConfig, center_mae, contrastive_loss, cross_entropy_smoothed, total_loss,
    triplet_batch_hard,
)
from dmpt.retrieval import average_precision, evaluate_features

SEEDS = range(5)


def verdict(number, title, ok, detail):
    VERDICTS.append(f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")
    assert ok, detail


def test_1_gradient_integrity():
    start = time.perf_counter()
    report = gradcheck(RunConfig(**MICRO))
    elapsed = time.perf_counter() - start
    ok = report.max_error < 1e-3 and elapsed < 60 and report.checked > 0
    verdict(1, "gradient integrity", ok,
            f"max rel error {report.max_error:.2e} over {report.checked} coords in {elapsed:.1f}s")


def test_2_frozen_backbone_invariance():
    corpus = generate_corpus(CorpusSpec())
    cfg = RunConfig(steps=100, log_every=0)
    before = frozen_checksum(DMPT(cfg, corpus.spec.num_ids))
    result = train(cfg, corpus)
    after = frozen_checksum(result.model)
    moved = full_checksum(result.model) != full_checksum(DMPT(cfg, corpus.spec.num_ids))
    verdict(2, "frozen backbone invariance", before == after and moved and result.step == 100,
            f"checksum {before[:12]} -> {after[:12]} after {result.step} steps")


def test_3_degenerate_equivalence():
    corpus = generate_corpus(CorpusSpec(seed=3))
    cfg = RunConfig(S=0, M=0, k=0, steps=20, log_every=0)
    model = DMPT(cfg, corpus.spec.num_ids)
    images = corpus.query.modality_images()
    bundle = model.encode(images)
    identical = True
    for m in MODALITIES:
        patches = model.backbone.patch_embed(images[m], m)
        cls_ref, tokens_ref = model.backbone.encode_plain(m, patches)
        b = bundle.branches[m]
        identical &= np.array_equal(b.cls.data, cls_ref.data) and np.array_equal(b.patches.data, tokens_ref.data)
        identical &= b.modal.shape[1] == 0 and b.semantic.shape[1] == 0
    part = parameter_partition(model)
    holding = [name for name, t in model.trainable() if t.size]
    head_only = holding == ["head"] and part.n_trainable == 3 * cfg.d_v * corpus.spec.num_ids

    # a linear probe: training moves only the head, the features stay put
    before = model.extract_features(images)
    trained = train(cfg, corpus).model
    after = trained.extract_features(images)
    _, feats = trained.forward(images)
    probe_logits = feats.data @ trained.head.data
    logits = trained.batch_features(images, corpus.query.labels).logits.data
    probe = np.array_equal(before, after) and np.array_equal(logits, probe_logits)
    verdict(3, "degenerate equivalence", identical and head_only and probe,
            f"bit-identical={identical} trainable={holding} frozen-features={probe}")


def test_4_oracle_equivalence():
    mismatches = []
    for seed in range(20):
        qf, ql, qids, gf, gl, gids = retrieval_fixture(seed)
        assert len(gf) <= 50
        got = evaluate_features(qf, ql, qids, gf, gl, gids)
        ref = brute_force(qf, ql, gf, gl, gids)
        if any(got[k] != ref[k] for k in ref):
            mismatches.append(seed)
    ap = average_precision([1, 0, 1])
    verdict(4, "oracle equivalence", not mismatches and ap == 5 / 6,
            f"20 fixtures, mismatches {mismatches}; AP[1,0,1]={ap!r}")


def _random_config(rng):
    heads = int(rng.choice([1, 2]))
    use_semantic = bool(rng.random() < 0.8)
    return RunConfig(
        layers=int(rng.integers(1, 4)), d_v=heads * int(rng.integers(1, 5)), d_t=heads * int(rng.integers(1, 5)),
        d_e=int(rng.integers(1, 7)), heads=heads, mlp_ratio=int(rng.integers(1, 4)), image_size=4,
        patch_size=int(rng.choice([1, 2, 4])), S=int(rng.integers(1, 6)), M=int(rng.integers(0, 4)),
        k=int(rng.integers(0, 3)), shared_proj=bool(rng.random() < 0.5), use_semantic=use_semantic,
        use_modality=use_semantic and bool(rng.random() < 0.7), use_bind=use_semantic and bool(rng.random() < 0.7),
        use_text=bool(rng.random() < 0.5), anchors=str(rng.choice(["modality", "identity"])),
    )


def test_5_closed_form_accounting():
    rng = np.random.default_rng(2024)
    wrong = []
    for i in range(10):
        cfg, n = _random_config(rng), int(rng.integers(2, 9))
        if count_params(cfg, n)["trainable"] != sum(trainable_terms(cfg, n).values()):
            wrong.append(i)
    base = RunConfig(layers=2, d_v=8, d_t=8, d_e=8, heads=2, image_size=4, patch_size=2, S=3, M=2, k=2,
                     anchors="identity")
    terms = trainable_terms(base, 5)
    deltas = {}
    for toggle, term in (("use_modality", "modality"), ("use_bind", "bind"), ("use_text", "text")):
        delta = count_params(base, 5)["trainable"] - count_params(base.with_overrides(**{toggle: False}), 5)["trainable"]
        deltas[term] = delta == terms[term] > 0
    # semantic prompts cannot be dropped alone: the other prompt components hang off them
    bare = base.with_overrides(use_semantic=False, use_modality=False, use_bind=False)
    deltas["semantic"] = (count_params(base.with_overrides(use_modality=False, use_bind=False), 5)["trainable"]
                          - count_params(bare, 5)["trainable"]) == terms["semantic"] > 0
    ok = not wrong and all(deltas.values())
    verdict(5, "closed-form accounting", ok, f"config mismatches {wrong}; toggle deltas {deltas}")


@pytest.mark.slow
def test_6_toy_convergence():
    start = time.perf_counter()
    maps, steps = [], []
    for seed in SEEDS:
        corpus = generate_corpus(CorpusSpec(seed=seed))
        assert (corpus.spec.num_ids, corpus.spec.samples_per_id, corpus.spec.rho) == (16, 8, 0.5)
        result = train(RunConfig(seed=seed, log_every=0), corpus)
        steps.append(result.step)
        maps.append(evaluate_model(result.model, corpus)["map"])
    elapsed = time.perf_counter() - start
    mean = float(np.mean(maps))
    ok = mean >= 0.9 and max(steps) <= 300 and elapsed < 300
    verdict(6, "toy convergence", ok,
            f"mean mAP {mean:.4f} (per seed {np.round(maps, 3).tolist()}) at {max(steps)} steps in {elapsed:.0f}s")


def _seed_mean(**overrides):
    maps = []
    for seed in SEEDS:
        corpus = generate_corpus(CorpusSpec(rho=0.8, seed=seed))
        result = train(RunConfig(seed=seed, log_every=0, **overrides), corpus)
        maps.append(evaluate_model(result.model, corpus)["map"])
    return float(np.mean(maps))


@pytest.mark.slow
def test_7_ablation_direction():
    rows = dict(COMPONENT_ROWS)
    semantic_only = _seed_mean(**rows["(1)"])
    semantic_bind = _seed_mean(**rows["(2)"])
    full = _seed_mean(**rows["(4)"])  # k=1 is the default, so this doubles as the k=1 cell
    k0 = _seed_mean(k=0)
    k2 = _seed_mean(k=2)
    ok = full >= semantic_bind >= semantic_only and full >= k0
    verdict(7, "ablation direction", ok,
            f"full {full:.4f} >= sem+bind {semantic_bind:.4f} >= sem {semantic_only:.4f}; "
            f"k1 {full:.4f} >= k0 {k0:.4f}; k2 {k2:.4f} (reported only)")


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def test_8_trivial_loss_identities():
    rng = np.random.default_rng(0)
    checks = {}
    z = T(rng.normal(size=(3, 4)))
    checks["one anchor -> 0"] = contrastive_loss(z, T(rng.normal(size=(1, 4))), [0, 0, 0], 0.07).item()
    checks["equidistant anchors -> ln 2"] = (
        contrastive_loss(T([[1.0, 0.0]]), T([[0.0, 1.0], [0.0, -1.0]]), [0], 0.07).item() - math.log(2))
    for eps in (0.0, 0.1, 0.5):
        checks[f"uniform logits eps={eps} -> ln N"] = (
            cross_entropy_smoothed(T(np.full((3, 7), 2.5)), [0, 3, 6], eps).item() - math.log(7))
    confident = np.zeros((2, 4))
    confident[0, 1] = confident[1, 3] = 40.0
    gap = cross_entropy_smoothed(T(confident), [1, 3], 0.0).item()
    checks["identical features -> margin"] = triplet_batch_hard(T(np.ones((4, 3))), [0, 0, 1, 1], 0.3).item() - 0.3
    separated = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]])
    checks["separated clusters -> 0"] = triplet_batch_hard(T(separated), [0, 0, 1, 1], 0.3).item()
    checks["singletons -> 0"] = center_mae(T(rng.normal(size=(4, 3))), [0, 1, 2, 3]).item()
    checks["{-1,+1} -> 1"] = center_mae(T([[-1.0], [1.0]]), [5, 5]).item() - 1.0

    labels = np.array([0, 0, 1, 1])
    logits = np.zeros((4, 2))
    logits[np.arange(4), labels] = 1000.0
    joint = {"RGB": JointPair(T(np.ones((4, 2))), T([[1.0, 1.0]]), np.zeros(4, dtype=int))}
    zero_batch = BatchFeatures(T(separated * 10), labels, T(logits), joint)
    checks["all terms zero -> 0"] = total_loss(zero_batch, LossConfig(margin=0.0, label_smoothing=0.0))[0].item()
    mixed = BatchFeatures(T(rng.normal(size=(4, 6))), labels, T(rng.normal(size=(4, 2))), {})
    masked = total_loss(mixed, LossConfig(weights=(1.0, 0.0, 0.0, 0.0)))[0].item()
    checks["weights (1,0,0,0) -> CE"] = masked - cross_entropy_smoothed(mixed.logits, labels, 0.1).item()

    bad = {k: v for k, v in checks.items() if abs(v) > 1e-9}
    ok = not bad and gap < 1e-6
    verdict(8, "trivial loss identities", ok,
            f"{len(checks)} identities within 1e-9, gap-40 CE {gap:.1e}; failures {bad}")


def test_9_reproducibility(tmp_path):
    corpus = generate_corpus(CorpusSpec(seed=1))
    cfg = RunConfig(steps=30, log_every=0, seed=4)
    evaluate_model(train(cfg, corpus).model, corpus, tmp_path / "a")
    evaluate_model(train(cfg, corpus).model, corpus, tmp_path / "b")
    same_json = (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()

    full = train(cfg, corpus)
    train(cfg, corpus, stop_at=13, checkpoint_dir=tmp_path / "ck")
    resumed = train(cfg, corpus, resume=tmp_path / "ck" / "final.ckpt")
    same_model = full_checksum(resumed.model) == full_checksum(full.model)
    same_state = all(resumed.optimizer.state()[k].tobytes() == v.tobytes() for k, v in full.optimizer.state().items())
    same_log = resumed.history == full.history[13:]
    ok = same_json and same_model and same_state and same_log
    verdict(9, "reproducibility", ok,
            f"metrics bytes equal={same_json}; resume at 13/30 weights={same_model} "
            f"optimizer={same_state} log={same_log}")
