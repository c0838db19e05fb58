"""Shared toy fixtures."""

import sys
from typing import Tuple

import numpy as np
import pytest

from fedcctr.idst_cl import IDSTCL, ItemFeatures, ModelBatch, ModelConfig, ModelParams, Vocab, pad_left

TOY_VOCAB = Vocab(n_items_a=7, n_items_b=6, n_feat_a=4, n_feat_b=3, n_side=5)


def toy_config(**overrides) -> ModelConfig:
    base = dict(d_id=4, d_feat=2, d_pos=2, d_other=3, heads=2, ffn_mult=2, mlp_widths=(6, 5, 4),
                dropout=0.0, max_len=5, lambda1=0.7, lambda2=0.6, alpha=0.9, tau=0.5)
    base.update(overrides)
    return ModelConfig(**base)


def toy_model(seed: int = 1, **overrides) -> Tuple[IDSTCL, ModelParams]:
    rng = np.random.default_rng(seed)
    feats = ItemFeatures.from_lists({
        "A": [list(rng.choice(4, size=rng.integers(1, 3), replace=False)) for _ in range(7)],
        "B": [list(rng.choice(3, size=rng.integers(1, 3), replace=False)) for _ in range(6)],
    })
    model = IDSTCL(toy_config(**overrides), TOY_VOCAB, feats)
    params = model.init_params(seed)
    params.flat[:] += 0.1 * rng.standard_normal(len(params))
    return model, params


def toy_batch(n: int = 3, seed: int = 2, max_len: int = 5) -> ModelBatch:
    rng = np.random.default_rng(seed)

    def seqs(count, n_items):
        return [list(rng.integers(0, n_items, size=rng.integers(1, max_len + 1))) for _ in range(count)]

    a_ids, a_mask = pad_left(seqs(2 * n, TOY_VOCAB.n_items_a), max_len)
    b_ids, b_mask = pad_left(seqs(2 * n, TOY_VOCAB.n_items_b), max_len)
    m_seq = [list(rng.integers(0, 6, size=4)) for _ in range(n)]
    m_dom = [list(rng.integers(0, 2, size=4)) for _ in range(n)]
    m_ids, m_mask, m_doms = pad_left(m_seq, max_len, m_dom)
    side_idx = rng.integers(0, TOY_VOCAB.n_side, size=(n, 3))
    side_w = np.full((n, 3), 1.0 / 3.0)
    y_a = rng.integers(0, 2, n).astype(float)
    y_b = rng.integers(0, 2, n).astype(float)
    return ModelBatch(a_ids, a_mask, b_ids, b_mask, m_ids, m_doms, m_mask, side_idx, side_w, y_a, y_b)


@pytest.fixture
def toy():
    model, params = toy_model()
    return model, params, toy_batch()


TINY_OVERRIDES = (
    "data.users=30", "data.items_per_domain=300", "data.sparsity=0.95", "data.popularity_skew=0.5",
    "data.min_item_frequency=0",
    "model.d_id=4", "model.d_feat=2", "model.d_pos=2", "model.d_other=3", "model.heads=2",
    "model.mlp_widths=[8,4]", "model.dropout=0.0", "model.max_len=6", "federation.batch_size=4",
)


def tiny_config(*extra: str, seed: int = 0):
    from fedcctr.config import ExperimentConfig, apply_override

    cfg = ExperimentConfig(seed=seed)
    for o in TINY_OVERRIDES + tuple(extra):
        apply_override(cfg, o)
    cfg.validate()
    return cfg


def tiny_world(*extra: str, seed: int = 0):
    """(config, split, augmented dataset, model, featurizer) for a tiny synthetic corpus."""
    from fedcctr import experiment as X

    cfg = tiny_config(*extra, seed=seed)
    records, meta = X.raw_dataset(cfg)
    split = X.split_dataset(cfg, records, meta)
    aug = X.augment(cfg, split)
    model, fz = X.build_model(cfg, split, aug)
    return cfg, split, aug, model, fz


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for i in range(1, 11):
        ok, detail = mod.RESULTS.get(f"C{i}", (False, "not recorded (deselected or raised before checking)"))
        terminalreporter.write_line(f"C{i} {'PASS' if ok else 'FAIL'}: {detail}")
