"""Acceptance criteria C1 to C10; each test records one PASS/FAIL line in the terminal summary."""

import math
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from conftest import TINY_OVERRIDES, toy_batch, toy_model, tiny_world
from fedcctr import experiment as X
from fedcctr.adaldp import (
    PrivacyState,
    clip_gradient,
    convert_rdp_to_dp,
    decay_sigma,
    gaussian_rdp,
    rdp_cost,
    rdp_cost_maintext,
)
from fedcctr.cli import main
from fedcctr.config import apply_override, load_config
from fedcctr.fed_runtime import ClientState, FedConfig, Transport, centralized_train, run_training
from fedcctr.idst_cl import DomainRepresentations, ModelParams, loss_bce, loss_cdrd, loss_idra
from fedcctr.instances import sample_local_batch
from fedcctr.metrics import evaluate_ranking
from fedcctr.nn_core import (
    FeedForward,
    Linear,
    MeanPool,
    MultiHeadAttention,
    ReLU,
    ResidualLayerNorm,
    TransformerEncoder,
    grad_check,
    relative_error,
)
from test_data_metrics import oracle_ranking
from test_idst_cl import numeric_model_grad, ref_bce, ref_cdrd, ref_idra

SMOKE_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "smoke.toml"
SEEDS = range(5)
RESULTS = {}


def record(criterion, ok, detail):
    RESULTS[criterion] = (bool(ok), detail)
    print(f"{criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{criterion}: {detail}"


def smoke_config(seed, *extra):
    cfg = load_config(SMOKE_CONFIG)
    for o in extra:
        apply_override(cfg, o)
    cfg.seed = seed
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# C1 gradients
# ---------------------------------------------------------------------------

def test_c1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mask = np.array([[True] * 4, [False, True, True, True]])
    rln = ResidualLayerNorm(6)
    rln.params["gain"][...] = rng.standard_normal(6)
    rln.params["bias"][...] = rng.standard_normal(6)
    enc = TransformerEncoder(8, 2, 16, rng=rng)
    for name in enc.params:
        enc.params[name][...] += 0.1 * rng.standard_normal(enc.params[name].shape)
    checks = {
        "linear": grad_check(Linear(5, 4, rng), rng.standard_normal((3, 5))),
        "relu": grad_check(ReLU(), rng.standard_normal((3, 5)) + 0.05),
        "attention": grad_check(MultiHeadAttention(8, 2, rng), rng.standard_normal((2, 4, 8)), mask=mask),
        "ffn": grad_check(FeedForward(6, 8, rng), rng.standard_normal((2, 3, 6))),
        "residual_ln": grad_check(rln, (rng.standard_normal((3, 6)), rng.standard_normal((3, 6)))),
        "mean_pool": grad_check(MeanPool(), rng.standard_normal((2, 4, 3)), mask=mask),
        "encoder": grad_check(enc, rng.standard_normal((2, 4, 8)), mask=mask),
    }
    errors = {k: r.max_rel_error for k, r in checks.items()}
    model, params = toy_model(seed=3, d_id=4, d_feat=2, d_pos=2)
    batch = toy_batch(n=2, seed=4)
    _, g = model.loss_and_grad(params, batch)
    errors["full_loss"] = relative_error(g, numeric_model_grad(model, params, batch))
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    record("C1", errors[worst] < 1e-4 and elapsed < 60,
           f"max rel error {errors[worst]:.2e} ({worst}), d_v={model.config.d_v}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# C2, C3 accountant
# ---------------------------------------------------------------------------

def _mp_cost(zeta, theta, sigma, rho, gm_scale):
    mpmath.mp.dps = 50
    z, t, s, r = (mpmath.mpf(x) for x in (zeta, theta, sigma, rho))
    eps_gm = gm_scale * z * t ** 2 / s ** 2
    return float(mpmath.log(1 + r ** 2 * (mpmath.exp((z - 1) * eps_gm) - 1)) / (z - 1))


def test_c2_accountant_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        z, t, s, r = (float(rng.uniform(1.05, 8)), float(rng.uniform(0.1, 2)), float(rng.uniform(0.5, 5)),
                      float(rng.uniform(0.001, 0.999)))
        worst = max(worst, abs(rdp_cost(z, t, s, r) - _mp_cost(z, t, s, r, 2)),
                    abs(rdp_cost_maintext(z, t, s, r) - _mp_cost(z, t, s, r, 1 / z)))
    boundary = all(
        rdp_cost(z, t, s, 0.0) == 0.0 and rdp_cost_maintext(z, t, s, 0.0) == 0.0
        and rdp_cost(z, t, s, 1.0) == gaussian_rdp(z, t, s)
        for z, t, s in [(2.0, 1.0, 1.0), (3.5, 0.7, 2.2), (1.5, 2.0, 4.0)])
    elapsed = time.perf_counter() - t0
    record("C2", worst <= 1e-12 and boundary and elapsed < 5,
           f"max abs error {worst:.1e} on 100 points, boundaries {'exact' if boundary else 'WRONG'}, {elapsed:.2f}s")


def test_c3_closed_forms():
    state = PrivacyState(sigma_0=1.0, epsilon_0=1.0, decay=0.997)
    for _ in range(10_000):
        state = decay_sigma(state)
    sigma_err = abs(state.sigma_t - 0.997 ** 10_000)
    conv = convert_rdp_to_dp(1.0, 2, math.exp(-10))
    clip_err = abs(np.linalg.norm(clip_gradient(np.array([1.0, 2.0, 2.0]), 1.0)) - 1.0)
    record("C3", sigma_err <= 1e-12 and conv == 11.0 and clip_err <= 1e-12,
           f"sigma_T error {sigma_err:.1e}, convert={conv!r}, clip norm error {clip_err:.1e}")


# ---------------------------------------------------------------------------
# C4, C5 federated runtime
# ---------------------------------------------------------------------------

def test_c4_federated_equals_centralized():
    _, _, _, model, fz = tiny_world("model.dropout=0.1")
    client = fz.all_clients(0)[0]
    init = model.init_params(2).flat
    open_priv = PrivacyState(sigma_0=0.0, epsilon_0=math.inf, rho=1.0, theta=math.inf, decay=1.0)
    fc = FedConfig(rounds=20, eta=0.05, rho=1.0, batch_size=4, optimizer="sgd", seed=7)
    fed = run_training(model, [ClientState(client, open_priv)], fc, init_params=init).model.params
    cen = centralized_train(model, client, 20, 0.05, batch_size=4, seed=7, init_params=init)
    diff = float(np.max(np.abs(fed - cen)))
    record("C4", diff <= 1e-10, f"max coordinate difference {diff:.1e} after 20 rounds")


def rounds_until_stop(eps0, sigma_0, decay, theta, rho, zeta, cap=10_000):
    """Scalar budget simulation on the server clock (first round is t = 1)."""
    remaining = mpmath.mpf(eps0)
    for t in range(1, cap + 1):
        cost = mpmath.mpf(_mp_cost(zeta, theta, sigma_0 * decay ** t, rho, 2))
        if remaining - cost <= 0:
            return t - 1
        remaining -= cost
    return cap


def test_c5_privacy_protocol_trace():
    _, _, _, model, fz = tiny_world()
    client = fz.all_clients(0)[1]
    sigma_0, decay, theta, zeta, k_target = 1.5, 0.95, 1.0, 2.0, 6
    eps0 = sum(rdp_cost(zeta, theta, sigma_0 * decay ** t, 1.0) for t in range(1, k_target + 1)) \
        + 0.5 * rdp_cost(zeta, theta, sigma_0 * decay ** (k_target + 1), 1.0)
    k = rounds_until_stop(eps0, sigma_0, decay, theta, 1.0, zeta)
    priv = PrivacyState(sigma_0=sigma_0, epsilon_0=eps0, zeta=zeta, rho=1.0, theta=theta, decay=decay)
    fc = FedConfig(rounds=25, eta=0.05, rho=1.0, batch_size=4, seed=5)
    init = model.init_params(0).flat
    transport = Transport(keep_log=True)
    run_training(model, [ClientState(client, priv)], fc, init_params=init, transport=transport)
    sent = transport.uploaded_vectors()

    # replay the local computation to obtain each round's pre-noise gradient
    p = ModelParams(model.shapes, init.copy())
    leaks = 0
    for t, v in enumerate(sent, start=1):
        batch = sample_local_batch(client, np.random.default_rng([fc.seed, client.client_id, t, 1]),
                                   fc.batch_size, model.config.max_len)
        _, g = model.loss_and_grad(p, batch, np.random.default_rng([fc.seed, client.client_id, t, 2]))
        leaks += int(np.array_equal(v, g) or np.array_equal(v, clip_gradient(g, theta)))
        p = ModelParams(model.shapes, p.flat - fc.eta * v)
    record("C5", k == k_target and len(sent) == k and leaks == 0,
           f"oracle k={k}, gradients emitted={len(sent)}, payloads equal to a pre-noise gradient={leaks}")


# ---------------------------------------------------------------------------
# C6, C7 oracles
# ---------------------------------------------------------------------------

def test_c6_loss_oracles():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 6))
        reps = [DomainRepresentations(*(rng.standard_normal(8) for _ in range(5))) for _ in range(n)]
        alpha, tau = float(rng.uniform(0, 2)), float(rng.uniform(0.05, 2))
        p, y = rng.uniform(0, 1, n), rng.integers(0, 2, n)
        worst = max(worst, abs(loss_idra(reps, alpha) - ref_idra(reps, alpha)),
                    abs(loss_cdrd(reps, tau) - ref_cdrd(reps, tau)), abs(loss_bce(p, y) - ref_bce(p, y)))
    scale_err = 0.0
    for _ in range(100):
        reps = [DomainRepresentations(*(rng.standard_normal(8) for _ in range(5))) for _ in range(4)]
        scaled = [DomainRepresentations(*(3 * v for v in (r.h_A, r.h_B, r.h_M, r.hp_A, r.hp_B))) for r in reps]
        scale_err = max(scale_err, abs(loss_idra(scaled, 0.5) - loss_idra(reps, 0.5)))
    record("C6", worst <= 1e-10 and scale_err <= 1e-12,
           f"max oracle error {worst:.1e} on 1000 batches, idra scale error {scale_err:.1e}")


def test_c7_metrics_oracle():
    rng = np.random.default_rng(3)
    n = 10_000
    scores = rng.integers(0, 40, size=(n, 100)).astype(float)
    ids = np.stack([rng.permutation(5000)[:100] for _ in range(n)])
    ranks = [oracle_ranking(list(scores[i]), list(ids[i])) for i in range(n)]
    m = evaluate_ranking(scores, ids)
    exact = all(
        m.ndcg_at[k] == math.fsum(1 / math.log2(r + 1) for r in ranks if r <= k) / n
        and m.mrr_at[k] == math.fsum(1 / r for r in ranks if r <= k) / n
        for k in (2, 5, 10))
    rnd = evaluate_ranking(rng.random((n, 100)), np.tile(np.arange(100), (n, 1))).ndcg_at[10]
    record("C7", exact and abs(rnd - 0.0454) <= 0.005,
           f"oracle {'exact' if exact else 'MISMATCH'} on 10^4 instances, random NDCG@10={rnd:.4f}")


# ---------------------------------------------------------------------------
# C8, C9 smoke runs
# ---------------------------------------------------------------------------

def _smoke_data(cfg):
    records, meta = X.raw_dataset(cfg)
    split = X.split_dataset(cfg, records, meta)
    return split, X.augment(cfg, split)


@pytest.fixture(scope="module")
def smoke_runs():
    """Full model and the lambda1 = lambda2 = 0 arm on five seeds, no privacy."""
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        cfg = smoke_config(seed, "privacy.enabled=false")
        split, aug = _smoke_data(cfg)
        full = X.train(cfg, split, aug)
        plain = X.train(smoke_config(seed, "privacy.enabled=false", "model.lambda1=0.0", "model.lambda2=0.0"),
                        split, aug)
        out[seed] = (full, X.mean_ndcg(full.evaluate()), X.mean_ndcg(plain.evaluate()))
    return out, time.perf_counter() - t0


@pytest.mark.slow
def test_c8_end_to_end_smoke(smoke_runs):
    runs, elapsed = smoke_runs
    cfg = runs[0][0].cfg
    assert cfg.data.users == 200 and cfg.data.items_per_domain == 500 and cfg.federation.rounds == 50
    reports = runs[0][0].result.reports
    loss_1, loss_50 = reports[0].mean_loss, reports[-1].mean_loss
    ndcg = runs[0][1]
    wins = sum(full >= plain for _, full, plain in runs.values())
    pairs = ", ".join(f"{full:.3f}/{plain:.3f}" for _, full, plain in runs.values())
    a, b, c = loss_50 < loss_1, ndcg > 0.10, wins >= 4
    record("C8", a and b and c and elapsed < 600,
           f"(a) loss {loss_1:.4f}->{loss_50:.4f} {'ok' if a else 'FAIL'}; (b) NDCG@10={ndcg:.4f} "
           f"{'ok' if b else 'FAIL'}; (c) full>=no-contrastive in {wins}/5 seeds [{pairs}] "
           f"{'ok' if c else 'FAIL'}; {elapsed:.0f}s")


@pytest.mark.slow
def test_c9_adaptive_vs_static_noise():
    t0 = time.perf_counter()
    wins, pairs = 0, []
    for seed in SEEDS:
        cfg = smoke_config(seed)
        split, aug = _smoke_data(cfg)
        static_cfg = X.make_static(cfg)
        decayed = X.mean_ndcg(X.train(cfg, split, aug).evaluate())
        static = X.mean_ndcg(X.train(static_cfg, split, aug).evaluate())
        wins += decayed >= static
        pairs.append(f"{decayed:.3f}/{static:.3f}")
    p = cfg.privacy
    record("C9", wins >= 4,
           f"R={p.decay} >= R=1 (sigma0 {p.sigma_0} vs {static_cfg.privacy.sigma_0:.5f}) in {wins}/5 seeds "
           f"[{', '.join(pairs)}]; {time.perf_counter() - t0:.0f}s")


# ---------------------------------------------------------------------------
# C10 reproducibility
# ---------------------------------------------------------------------------

def test_c10_byte_identical_reruns(tmp_path):
    args = []
    for s in TINY_OVERRIDES + ("federation.rounds=5", "federation.rho=0.3", "privacy.epsilon=3.0"):
        args += ["--set", s]
    for name in ("r1", "r2"):
        assert main(["train", "--out", str(tmp_path / name)] + args) == 0
    files = ["checkpoint.bin", "rounds.csv", "loss_terms.csv", "privacy_trace.csv"]
    same = [f for f in files if (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()]
    record("C10", len(same) == len(files), f"{len(same)}/{len(files)} outputs byte-identical")
