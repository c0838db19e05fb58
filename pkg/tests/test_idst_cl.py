"""Loss oracles, model structure and full-model gradient checks."""

import math

import numpy as np
import pytest

from conftest import TOY_VOCAB, toy_batch, toy_model
from fedcctr.idst_cl import (
    PROB_CLAMP,
    DomainRepresentations,
    MLPHead,
    ModelBatch,
    ModelConfig,
    ModelParams,
    loss_bce,
    loss_cdrd,
    loss_idra,
    loss_total,
    model_backward,
    pad_left,
    predict_ctr,
)
from fedcctr.nn_core import ConfigError, EmptySequenceError, relative_error


def ref_cos(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def ref_idra(reps, alpha):
    return sum(max(0.0, alpha - ref_cos(r.h_A, r.hp_A)) + max(0.0, alpha - ref_cos(r.h_B, r.hp_B))
               for r in reps) / len(reps)


def ref_cdrd(reps, tau):
    """Direct (unstabilized) evaluation of the batch contrastive loss."""
    den = sum(math.exp(ref_cos(r.h_A, r.h_B) / tau) for r in reps)
    total = 0.0
    for r in reps:
        num = math.exp(ref_cos(r.h_M, r.h_A) / tau) + math.exp(ref_cos(r.h_M, r.h_B) / tau)
        total += -math.log(num / den)
    return total / len(reps)


def ref_bce(p, y):
    total = 0.0
    for pi, yi in zip(p, y):
        pi = min(max(pi, PROB_CLAMP), 1 - PROB_CLAMP)
        total += -(yi * math.log(pi) + (1 - yi) * math.log(1 - pi))
    return total / len(p)


def random_reps(rng, n, d=6):
    return [DomainRepresentations(*(rng.standard_normal(d) for _ in range(5))) for _ in range(n)]


def reps_of(hA, hB, hM, hpA=None, hpB=None):
    return [DomainRepresentations(np.asarray(hA, float), np.asarray(hB, float), np.asarray(hM, float),
                                  np.asarray(hpA if hpA is not None else hA, float),
                                  np.asarray(hpB if hpB is not None else hB, float))]


# ---------------------------------------------------------------------------
# loss oracles
# ---------------------------------------------------------------------------

def test_idra_examples():
    e0, e1 = np.eye(2)
    assert loss_idra(reps_of(e0, e1, e0), 0.5) == 0.0
    assert loss_idra(reps_of(e0, e0, e0, hpA=e1, hpB=e1), 0.5) == 1.0


def test_idra_alpha_above_one_always_active():
    x = np.array([1.0, 2.0])
    assert loss_idra(reps_of(x, x, x), 2.0) == pytest.approx(2.0, abs=1e-15)


def test_cdrd_examples():
    x = np.array([0.3, -0.4, 1.0])
    assert loss_cdrd(reps_of(x, x, x), 0.1) == pytest.approx(-math.log(2), abs=1e-12)
    e0, e1 = np.eye(2)
    assert loss_cdrd(reps_of(e1, e1, e0), 0.1) == pytest.approx(10 - math.log(2), abs=1e-12)


def test_cdrd_rejects_nonpositive_tau():
    with pytest.raises(ConfigError):
        loss_cdrd(reps_of([1.0], [1.0], [1.0]), 0.0)


def test_bce_examples():
    assert loss_bce([0.5], [1]) == pytest.approx(math.log(2), abs=1e-15)
    assert loss_bce([1 - 1e-7], [1]) == pytest.approx(1e-7, rel=1e-6)
    assert math.isfinite(loss_bce([0.0, 1.0], [1, 0]))


def test_total_loss_examples():
    assert loss_total(0.2, 0.3, 5.0, 7.0, 0.0, 0.0) == 0.5
    assert loss_total(1, 1, 1, 1, 1, 1) == 4


@pytest.mark.parametrize("seed", range(4))
def test_loss_oracles_random_batches(seed):
    rng = np.random.default_rng(seed)
    for _ in range(250):
        n = int(rng.integers(1, 5))
        reps = random_reps(rng, n)
        alpha, tau = float(rng.uniform(0, 2)), float(rng.uniform(0.05, 2))
        assert abs(loss_idra(reps, alpha) - ref_idra(reps, alpha)) < 1e-10
        assert abs(loss_cdrd(reps, tau) - ref_cdrd(reps, tau)) < 1e-10
        p, y = rng.uniform(0, 1, n), rng.integers(0, 2, n)
        assert abs(loss_bce(p, y) - ref_bce(p, y)) < 1e-10


def test_contrastive_losses_scale_invariant():
    rng = np.random.default_rng(5)
    for _ in range(100):
        reps = random_reps(rng, 4)
        scaled = [DomainRepresentations(*(3 * v for v in (r.h_A, r.h_B, r.h_M, r.hp_A, r.hp_B))) for r in reps]
        assert abs(loss_idra(scaled, 0.5) - loss_idra(reps, 0.5)) < 1e-12
        assert abs(loss_cdrd(scaled, 0.1) - loss_cdrd(reps, 0.1)) < 1e-10


def test_idra_non_negative_and_zero_iff_similar():
    rng = np.random.default_rng(6)
    for _ in range(200):
        reps = random_reps(rng, 3)
        alpha = float(rng.uniform(-1, 1))
        val = loss_idra(reps, alpha)
        assert val >= 0
        sims = [s for r in reps for s in (ref_cos(r.h_A, r.hp_A), ref_cos(r.h_B, r.hp_B))]
        assert (val == 0) == all(s >= alpha for s in sims)


def test_cdrd_stable_at_small_tau():
    rng = np.random.default_rng(7)
    reps = random_reps(rng, 4)
    assert math.isfinite(loss_cdrd(reps, 1e-4))


# ---------------------------------------------------------------------------
# heads and embeddings
# ---------------------------------------------------------------------------

def test_zero_head_predicts_half():
    head = MLPHead(7, (4, 3))
    for layer in head.layers:
        layer.params["W"][...] = 0.0
    assert predict_ctr(np.ones(3), np.ones(3), np.ones(1), head) == 0.5


def test_head_default_widths():
    assert ModelConfig().mlp_widths == (512, 256, 128)
    head = MLPHead(10, ModelConfig().mlp_widths)
    assert [l.out_dim for l in head.layers] == [512, 256, 128, 1]


def _compose(head, x):
    for layer in head.layers[:-1]:
        x = np.maximum(x @ layer.params["W"] + layer.params["b"], 0)
    return float(x @ head.layers[-1].params["W"][:, 0] + head.layers[-1].params["b"][0])


def test_head_matches_layer_composition():
    rng = np.random.default_rng(8)
    head = MLPHead(5, (4, 3), rng)
    for layer in head.layers:
        layer.params["b"][...] = rng.standard_normal(layer.params["b"].shape)
    x = rng.standard_normal(5)
    expected = 1 / (1 + math.exp(-_compose(head, x)))
    assert predict_ctr(x[:2], x[2:4], x[4:], head) == pytest.approx(expected, abs=1e-14)


def test_embedding_truncates_to_max_len():
    model, params = toy_model(max_len=5)
    seq = list(range(7)) * 2  # 14 items
    E, mask = model.embed_sequence(params, seq, "A")
    assert E.shape == (5, model.config.d_v)
    assert mask.all()
    E_tail, _ = model.embed_sequence(params, seq[-5:], "A")
    np.testing.assert_array_equal(E, E_tail)


def test_embedding_empty_sequence():
    model, params = toy_model()
    E, mask = model.embed_sequence(params, [], "B")
    assert not mask.any()
    np.testing.assert_array_equal(E, 0.0)
    with pytest.raises(EmptySequenceError):
        model.encode_domain(params, E, mask, "B")


def test_embedding_row_dim():
    model, params = toy_model()
    E, _ = model.embed_sequence(params, [1, 2, 3], "A")
    assert E.shape[-1] == model.config.d_id + model.config.d_feat + model.config.d_pos


def test_single_item_encoding_deterministic():
    model, params = toy_model()
    E, mask = model.embed_sequence(params, [4], "A")
    np.testing.assert_array_equal(model.encode_domain(params, E, mask, "A"),
                                  model.encode_domain(params, E, mask, "A"))


def test_domain_encoders_are_independent():
    model, params = toy_model()
    E, mask = model.embed_sequence(params, [1, 2, 3], "A")
    assert not np.allclose(model.encode_domain(params, E, mask, "A"), model.encode_domain(params, E, mask, "B"))


def test_three_item_sequence_matches_layer_composition():
    model, params = toy_model()
    E, mask = model.embed_sequence(params, [1, 5, 2], "A")
    rows = E[mask]
    pre = "enc_A."
    p = lambda k: params[pre + k]
    H, dh = model.config.heads, model.config.d_v // model.config.heads
    q, k, v = rows @ p("mha.W_Q"), rows @ p("mha.W_K"), rows @ p("mha.W_V")
    heads = []
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append((w / w.sum(axis=1, keepdims=True)) @ v[:, sl])
    S = np.concatenate(heads, axis=1) @ p("mha.W_O")

    def ln(z, g, b):
        mu, var = z.mean(axis=1, keepdims=True), z.var(axis=1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-5) * g + b

    S1 = ln(rows + S, p("ln1.gain"), p("ln1.bias"))
    F = np.maximum(S1 @ p("ffn.W1") + p("ffn.b1"), 0) @ p("ffn.W2") + p("ffn.b2")
    ref = ln(S1 + F, p("ln2.gain"), p("ln2.bias")).mean(axis=0)
    np.testing.assert_allclose(model.encode_domain(params, E, mask, "A"), ref, atol=1e-12)


def test_zeroing_domain_b_encoder_leaves_a_and_m_unchanged(toy):
    model, params, batch = toy
    before = model.representations(params, batch)
    p2 = params.copy()
    for name in model.shapes:
        if name.startswith("enc_B."):
            p2[name][...] = 0.0
    after = model.representations(p2, batch)
    np.testing.assert_array_equal(after.h_A, before.h_A)
    np.testing.assert_array_equal(after.h_M, before.h_M)
    assert not np.allclose(after.h_B, before.h_B)


def test_params_flatten_roundtrip(toy):
    model, params, _ = toy
    flat = params.flatten()
    again = params.unflatten(flat)
    for name in model.shapes:
        np.testing.assert_array_equal(again[name], params[name])
    assert len(params) == model.n_params()


def test_model_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_id=3, d_feat=2, d_pos=2, heads=2).validate()
    with pytest.raises(ConfigError):
        ModelConfig(lambda1=1.5).validate()
    with pytest.raises(ConfigError):
        ModelConfig(tau=0.0).validate()


# ---------------------------------------------------------------------------
# full-model gradients
# ---------------------------------------------------------------------------

def numeric_model_grad(model, params, batch, **kw):
    num = np.zeros(len(params))
    h = 1e-5
    for i in range(len(params)):
        old = params.flat[i]
        params.flat[i] = old + h
        fp = model.loss_and_grad(params, batch, grad=False, **kw)[0].total
        params.flat[i] = old - h
        fm = model.loss_and_grad(params, batch, grad=False, **kw)[0].total
        params.flat[i] = old
        num[i] = (fp - fm) / (2 * h)
    return num


def test_full_model_gradient_matches_finite_differences(toy):
    model, params, batch = toy
    _, g = model.loss_and_grad(params, batch)
    num = numeric_model_grad(model, params, batch)
    assert relative_error(g, num) < 1e-4


def test_two_user_dim_8_gradient():
    model, params = toy_model(seed=3, d_id=4, d_feat=2, d_pos=2)
    assert model.config.d_v == 8
    batch = toy_batch(n=2, seed=4)
    g = model_backward(model, params, batch, 0.3, 0.5, 0.5, 0.1)
    num = numeric_model_grad(model, params, batch, lambda1=0.3, lambda2=0.5, alpha=0.5, tau=0.1)
    assert relative_error(g, num) < 1e-4


def test_zero_lambdas_drop_contrastive_paths(toy):
    model, params, batch = toy
    losses, g = model.loss_and_grad(params, batch, lambda1=0.0, lambda2=0.0)
    assert losses.total == losses.bce_a + losses.bce_b
    # the original-sequence rows only feed IDRA, so their embeddings get no gradient
    n = batch.n
    orig_only = set(batch.a_ids[n:][batch.a_mask[n:]]) - set(batch.a_ids[:n][batch.a_mask[:n]]) \
        - set(batch.m_ids[batch.m_mask & (batch.m_dom == 0)])
    grads = ModelParams(model.shapes, g)
    for item in orig_only:
        np.testing.assert_array_equal(grads["item_A"][item], 0.0)
    batch2 = ModelBatch(batch.a_ids.copy(), batch.a_mask, batch.b_ids.copy(), batch.b_mask, batch.m_ids,
                        batch.m_dom, batch.m_mask, batch.side_idx, batch.side_w, batch.y_a, batch.y_b)
    batch2.a_ids[n:] = (batch2.a_ids[n:] + 1) % TOY_VOCAB.n_items_a
    batch2.b_ids[n:] = (batch2.b_ids[n:] + 1) % TOY_VOCAB.n_items_b
    _, g2 = model.loss_and_grad(params, batch2, lambda1=0.0, lambda2=0.0)
    np.testing.assert_array_equal(g, g2)


def test_duplicated_batch_leaves_gradient_unchanged():
    # the contrastive denominator only gains a constant ln 2
    model, params = toy_model()
    batch = toy_batch(n=3)
    rows = np.array([0, 1, 2, 0, 1, 2])
    _, g1 = model.loss_and_grad(params, batch)
    _, g2 = model.loss_and_grad(params, batch.take(rows))
    np.testing.assert_allclose(g2, g1, atol=1e-12)


def test_pad_left_keeps_most_recent():
    ids, mask = pad_left([[1, 2, 3, 4, 5, 6, 7], [9]], 4)
    np.testing.assert_array_equal(ids, [[4, 5, 6, 7], [0, 0, 0, 9]])
    np.testing.assert_array_equal(mask, [[True] * 4, [False, False, False, True]])
