"""Instruction/morphology embeddings and TopK-softmax routing gates."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import divmorph.autodiff as ad
from divmorph.errors import ContractViolationError
from divmorph.gating import (
    EMBED_DIM,
    embed_morph,
    embed_morph_t,
    embed_task,
    gate_forward,
    gate_forward_t,
    gate_logits,
    init_gate,
    init_morph_encoder,
    topk_support,
)
from tests.conftest import chain_morph


def gate_from_logits(logits):
    """GateParams that make gate_logits output exactly `logits` for any input:
    zero first layer (tanh(0) = 0), zero second weight, logits as bias."""
    logits = np.asarray(logits, dtype=np.float64)
    return {
        "w1": np.zeros((EMBED_DIM, 64)), "b1": np.zeros(64),
        "w2": np.zeros((64, logits.size)), "b2": logits.copy(),
    }


# ---------------------------------------------------------------------------
# embed_task
# ---------------------------------------------------------------------------

def test_embed_task_deterministic():
    a = embed_task("walk forward")
    b = embed_task("walk forward")
    assert np.array_equal(a, b)


def test_embed_task_unit_norm():
    for text in ("escape", "walk forward on flat ground", "a b c d e f g"):
        assert abs(np.linalg.norm(embed_task(text)) - 1.0) < 1e-9


def test_embed_task_shared_tokens_positive_cosine():
    a = embed_task("walk forward on flat ground")
    b = embed_task("walk forward up an incline")
    assert float(a @ b) > 0.0


def test_embed_task_bucket_oracle():
    # Independent FNV-1a 64-bit re-implementation as the oracle.
    def fnv(s):
        h = 14695981039346656037
        for byte in s.encode():
            h = ((h ^ byte) * 1099511628211) % 2**64
        return h

    vec = embed_task("walk forward walk")
    expect = np.zeros(EMBED_DIM)
    expect[fnv("walk") % EMBED_DIM] += 2
    expect[fnv("forward") % EMBED_DIM] += 1
    expect /= np.linalg.norm(expect)
    assert np.allclose(vec, expect, atol=1e-12)


def test_embed_task_case_and_punctuation():
    assert np.array_equal(embed_task("Walk, Forward!"), embed_task("walk forward"))


def test_embed_task_empty_rejected():
    with pytest.raises(ContractViolationError):
        embed_task("  ... !!")


# ---------------------------------------------------------------------------
# embed_morph
# ---------------------------------------------------------------------------

def test_embed_morph_deterministic(morph3):
    params = init_morph_encoder(np.random.default_rng(0))
    a = embed_morph(morph3, params)
    b = embed_morph(morph3, params)
    assert np.array_equal(a, b)
    assert a.shape == (EMBED_DIM,)


def test_embed_morph_zero_weights_gives_bias(morph3):
    params = {k: np.zeros_like(v)
              for k, v in init_morph_encoder(np.random.default_rng(0)).items()}
    assert np.array_equal(embed_morph(morph3, params), np.zeros(EMBED_DIM))
    params["b3"] = np.arange(EMBED_DIM, dtype=np.float64)
    assert np.array_equal(embed_morph(morph3, params), params["b3"])


def test_embed_morph_identical_limbs_pooling():
    # A morphology of identical limbs at identical positional features would
    # pool to the per-limb MLP output itself; approximate by comparing a
    # 4-limb uniform chain against the hand-computed pooled forward.
    limb = (0.5, 1.0, 0.2, 1.0)
    m = chain_morph("u4", [limb] * 4)
    params = init_morph_encoder(np.random.default_rng(3))
    from divmorph.envs import limb_context
    feats = limb_context(m)
    h = np.tanh(feats @ params["w1"] + params["b1"])
    h = np.tanh(h @ params["w2"] + params["b2"])
    pooled = np.concatenate([h.mean(axis=0), h.max(axis=0)])
    oracle = pooled @ params["w3"] + params["b3"]
    assert np.allclose(embed_morph(m, params), oracle, atol=1e-12)


def test_embed_morph_t_matches_numpy(morph3):
    params = init_morph_encoder(np.random.default_rng(4))
    t = {k: ad.Tensor(v) for k, v in params.items()}
    with ad.no_grad():
        got = embed_morph_t(morph3, t).data
    assert np.allclose(got, embed_morph(morph3, params), atol=1e-12)


# ---------------------------------------------------------------------------
# gate_forward
# ---------------------------------------------------------------------------

def test_gate_forward_hand_computed():
    g = gate_forward(np.zeros(EMBED_DIM), gate_from_logits([2.0, 1.0, 0.0, -1.0]), 2)
    # softmax over {2, 1}: e/(e+1) etc.
    assert np.nonzero(g)[0].tolist() == [0, 1]
    assert abs(g[0] - 0.731) < 1e-3
    assert abs(g[1] - 0.269) < 1e-3
    assert abs(g.sum() - 1.0) < 1e-12


def test_gate_forward_k_equals_n_is_dense_softmax():
    logits = np.array([0.3, -1.2, 0.8])
    g = gate_forward(np.zeros(EMBED_DIM), gate_from_logits(logits), 3)
    e = np.exp(logits - logits.max())
    assert np.allclose(g, e / e.sum(), atol=1e-12)


def test_gate_forward_k1_is_onehot():
    g = gate_forward(np.zeros(EMBED_DIM), gate_from_logits([0.1, 3.0, -2.0]), 1)
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_topk_tie_break_lowest_index():
    assert topk_support(np.array([1.0, 2.0, 2.0, 2.0]), 2).tolist() == [1, 2]
    assert topk_support(np.array([5.0, 5.0, 5.0]), 1).tolist() == [0]
    g = gate_forward(np.zeros(EMBED_DIM), gate_from_logits([1.0, 1.0, 1.0, 0.0]), 2)
    assert np.nonzero(g)[0].tolist() == [0, 1]


def test_topk_k_out_of_range():
    with pytest.raises(ContractViolationError):
        topk_support(np.zeros(4), 0)
    with pytest.raises(ContractViolationError):
        topk_support(np.zeros(4), 5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-60, 60), min_size=2, max_size=12),
       st.integers(1, 12), st.floats(0.1, 5.0), st.floats(-10, 10))
def test_gate_contract_property(vals, k, a, b):
    # logits separated by >= 0.5 so the affine map cannot create new
    # floating-point ties (ties break by index, which a*z+b preserves
    # only when equal values stay equal and distinct stay distinct)
    logits = 0.5 * np.array(vals, dtype=np.float64)
    k = min(k, logits.size)
    g = gate_forward(np.zeros(EMBED_DIM), gate_from_logits(logits), k)
    assert np.count_nonzero(g) == k
    assert abs(g.sum() - 1.0) < 1e-9
    support = np.nonzero(g)[0]
    assert np.array_equal(support, topk_support(logits, k))
    # support invariance under positive affine transforms of logits
    g2 = gate_forward(np.zeros(EMBED_DIM), gate_from_logits(a * logits + b), k)
    assert np.array_equal(np.nonzero(g2)[0], support)


def test_gate_forward_t_matches_numpy():
    rng = np.random.default_rng(7)
    params = init_gate(6, rng)
    e = rng.standard_normal(EMBED_DIM)
    for k in (1, 3, 6):
        with ad.no_grad():
            got = gate_forward_t(ad.constant(e),
                                 {kk: ad.Tensor(v) for kk, v in params.items()},
                                 k).data
        assert np.allclose(got, gate_forward(e, params, k), atol=1e-12)


def test_gate_logits_shape():
    params = init_gate(5, np.random.default_rng(0))
    assert gate_logits(np.zeros(EMBED_DIM), params).shape == (5,)
