import numpy as np
import pytest

from oracles import scripted_attention, scripted_block

from dmpt.errors import DimensionError
from dmpt.modality import MODALITIES
from dmpt.numerics import Tensor
from dmpt.promptibind import (
    Branch, FeatureBundle, InteractionLevel, PromptIBind, b2m_cross_attention, compute_bind,
    interaction_level, interaction_stack, internal_interaction,
)

D = 4


def level(seed=0, heads=2, live=True):
    rng = np.random.default_rng(seed)
    lv = InteractionLevel(D, heads, 2, rng)
    if live:
        # wake the zero-initialised output projections and biases
        for t in lv.parameters():
            if t.ndim == 1 or not np.any(t.data):
                t.data += 0.3 * rng.normal(size=t.shape)
    return lv


def branch(rng, B=2, M=1, S=3, T=4, grad=False):
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=grad)
    return Branch(t(B, D), t(B, M, D), t(B, S, D), t(B, T, D))


def bundle(seed=0, grad=False, **kw):
    rng = np.random.default_rng(seed)
    branches = {m: branch(rng, grad=grad, **kw) for m in MODALITIES}
    return FeatureBundle(branches, {}, {})


def set_identity(lin):
    lin.w.data[...] = np.eye(D)
    lin.b.data[...] = 0.0


def test_bind_of_equal_prompts_is_that_prompt():
    lv = level()
    for m in MODALITIES:
        set_identity(lv.w_circ[m])
    p = np.random.default_rng(1).normal(size=(3, D))
    bind = compute_bind(lv, {m: Tensor(p) for m in MODALITIES})
    np.testing.assert_allclose(bind.data, p, atol=1e-15, rtol=0)


def test_bind_is_arithmetic_mean():
    lv = level()
    for m in MODALITIES:
        set_identity(lv.w_circ[m])
    bind = compute_bind(lv, {m: Tensor(np.full((1, D), float(i + 1))) for i, m in enumerate(MODALITIES)})
    assert np.array_equal(bind.data, np.full((1, D), 2.0))


def test_bind_matches_project_then_average():
    lv = level(seed=3)
    rng = np.random.default_rng(4)
    sem = {m: rng.normal(size=(5, D)) for m in MODALITIES}
    projected = []
    for m in MODALITIES:
        w, b = lv.w_circ[m].w.data, lv.w_circ[m].b.data
        projected.append(np.array([[sum(sem[m][i, k] * w[k, j] for k in range(D)) + b[j]
                                    for j in range(D)] for i in range(5)]))
    ref = (projected[0] + projected[1] + projected[2]) / 3
    got = compute_bind(lv, {m: Tensor(v) for m, v in sem.items()})
    np.testing.assert_allclose(got.data, ref, atol=1e-12, rtol=0)


def test_bind_shape_disagreement():
    lv = level()
    sem = {"RGB": Tensor(np.zeros((2, D))), "NIR": Tensor(np.zeros((2, D))), "TIR": Tensor(np.zeros((3, D)))}
    with pytest.raises(DimensionError):
        compute_bind(lv, sem)


def test_b2m_zero_bind_projection_returns_input():
    lv = level()
    lv.w_b.w.data[...] = 0.0
    lv.w_b.b.data[...] = 0.0
    rng = np.random.default_rng(0)
    s = Tensor(rng.normal(size=(3, D)))
    out = b2m_cross_attention(lv, "NIR", Tensor(rng.normal(size=(3, D))), s)
    assert np.array_equal(out.data, s.data)


def test_b2m_single_bind_token():
    lv = level(seed=2)
    rng = np.random.default_rng(5)
    s = rng.normal(size=(3, D))
    bind = rng.normal(size=(1, D))
    row = bind @ lv.w_b.w.data + lv.w_b.b.data
    out = b2m_cross_attention(lv, "RGB", Tensor(bind), Tensor(s))
    np.testing.assert_allclose(out.data, s + np.repeat(row, 3, axis=0), atol=1e-15, rtol=0)


def test_b2m_matches_scripted_attention():
    lv = level(seed=6)
    rng = np.random.default_rng(7)
    s, bind = rng.normal(size=(3, D)), rng.normal(size=(3, D))
    ref = scripted_attention(s, bind, lv.w_m["TIR"].w.data, lv.w_m["TIR"].b.data,
                             lv.w_b.w.data, lv.w_b.b.data)
    out = b2m_cross_attention(lv, "TIR", Tensor(bind), Tensor(s))
    np.testing.assert_allclose(out.data, ref, atol=1e-10, rtol=0)


def test_b2m_width_mismatch():
    with pytest.raises(DimensionError):
        b2m_cross_attention(level(), "RGB", Tensor(np.zeros((2, D + 1))), Tensor(np.zeros((2, D))))


@pytest.mark.parametrize("M,S,T", [(0, 1, 1), (1, 3, 4), (3, 2, 9)])
def test_internal_interaction_preserves_shapes(M, S, T):
    rng = np.random.default_rng(0)
    br = branch(rng, M=M, S=S, T=T)
    out = internal_interaction(level(), "RGB", br, br.semantic)
    for a, b in zip((br.cls, br.modal, br.semantic, br.patches), (out.cls, out.modal, out.semantic, out.patches)):
        assert a.shape == b.shape


def test_internal_interaction_starts_as_identity():
    lv = level(live=False)
    br = branch(np.random.default_rng(1))
    out = internal_interaction(lv, "NIR", br, br.semantic)
    for a, b in zip((br.cls, br.modal, br.semantic, br.patches), (out.cls, out.modal, out.semantic, out.patches)):
        assert np.array_equal(a.data, b.data)


def test_internal_interaction_matches_scripted_block():
    lv = level(seed=9, heads=1)
    br = branch(np.random.default_rng(2), B=1)
    coupled = Tensor(np.random.default_rng(3).normal(size=(1, 3, D)))
    out = internal_interaction(lv, "TIR", br, coupled)
    seq = np.concatenate([br.cls.data, br.modal.data[0], coupled.data[0], br.patches.data[0]])
    ref = scripted_block(seq, lv.sa["TIR"])
    np.testing.assert_allclose(out.cls.data[0], ref[0], atol=1e-10, rtol=0)
    np.testing.assert_allclose(out.modal.data[0], ref[1:2], atol=1e-10, rtol=0)
    np.testing.assert_allclose(out.semantic.data[0], ref[2:5], atol=1e-10, rtol=0)
    np.testing.assert_allclose(out.patches.data[0], ref[5:], atol=1e-10, rtol=0)


def stack(depth, seed=0):
    st = PromptIBind(depth, D, 2, 2, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for t in st.parameters():
        if t.ndim == 1 or not np.any(t.data):
            t.data += 0.3 * rng.normal(size=t.shape)
    return st


def branches_equal(a, b):
    return all(np.array_equal(getattr(a[m], f).data, getattr(b[m], f).data)
               for m in MODALITIES for f in ("cls", "modal", "semantic", "patches"))


def test_stack_depth_zero_is_identity():
    bd = bundle()
    out = interaction_stack(stack(0), bd)
    assert all(out.branches[m] is bd.branches[m] for m in MODALITIES)


def test_stack_depth_one_is_the_composition():
    st, bd = stack(1), bundle(1)
    lv = st.levels[0]
    bind = compute_bind(lv, {m: bd.branches[m].semantic for m in MODALITIES})
    manual = {}
    for m in MODALITIES:
        coupled = b2m_cross_attention(lv, m, bind, bd.branches[m].semantic)
        manual[m] = internal_interaction(lv, m, bd.branches[m], coupled)
    assert branches_equal(interaction_stack(st, bd).branches, manual)


def test_stack_depth_two_applies_levels_in_sequence():
    st, bd = stack(2, seed=4), bundle(2)
    first = interaction_level(st.levels[0], bd.branches)
    second = interaction_level(st.levels[1], first)
    assert branches_equal(interaction_stack(st, bd).branches, second)
    # untied levels: applying level 0 twice differs
    assert not branches_equal(interaction_level(st.levels[0], first), second)


def test_stack_recomputes_bind_per_level(monkeypatch):
    import dmpt.promptibind as pib
    calls = []
    real = pib.compute_bind

    def spy(lv, sem):
        calls.append({m: sem[m].data.copy() for m in MODALITIES})
        return real(lv, sem)

    monkeypatch.setattr(pib, "compute_bind", spy)
    st, bd = stack(2), bundle(3)
    interaction_stack(st, bd)
    assert len(calls) == 2
    assert not np.array_equal(calls[0]["RGB"], calls[1]["RGB"])


def test_modality_symmetry():
    lv = level(seed=11)
    bd = bundle(5)
    perm = {"RGB": "NIR", "NIR": "TIR", "TIR": "RGB"}
    swapped = InteractionLevel(D, 2, 2, np.random.default_rng(0))
    swapped.w_b = lv.w_b
    swapped.w_circ = {perm[m]: lv.w_circ[m] for m in MODALITIES}
    swapped.w_m = {perm[m]: lv.w_m[m] for m in MODALITIES}
    swapped.sa = {perm[m]: lv.sa[m] for m in MODALITIES}
    out = interaction_level(lv, bd.branches)
    out_p = interaction_level(swapped, {perm[m]: bd.branches[m] for m in MODALITIES})
    for m in MODALITIES:
        for f in ("cls", "modal", "semantic", "patches"):
            np.testing.assert_allclose(getattr(out_p[perm[m]], f).data, getattr(out[m], f).data,
                                       atol=1e-12, rtol=0)


def test_b2m_calls_are_order_independent():
    lv = level(seed=12)
    bd = bundle(6)
    bind = compute_bind(lv, {m: bd.branches[m].semantic for m in MODALITIES})
    forward = {m: b2m_cross_attention(lv, m, bind, bd.branches[m].semantic).data for m in MODALITIES}
    backward = {m: b2m_cross_attention(lv, m, bind, bd.branches[m].semantic).data for m in reversed(MODALITIES)}
    for m in MODALITIES:
        assert np.array_equal(forward[m], backward[m])


def test_complementary_gradient_flows_only_through_prompts():
    lv = level(seed=13)
    bd = bundle(7, grad=True)
    out = interaction_level(lv, bd.branches)
    out["RGB"].semantic.sum().backward()
    for m in ("NIR", "TIR"):
        assert np.any(bd.branches[m].semantic.grad != 0)
        for f in ("cls", "modal", "patches"):
            g = getattr(bd.branches[m], f).grad
            assert g is None or not np.any(g)
