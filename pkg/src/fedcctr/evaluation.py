"""Scoring of leave-one-out candidates with a trained model."""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import DOMAINS
from .idst_cl import IDSTCL, ModelParams
from .instances import ClientData, EvalInstance, _side_arrays, eval_inputs, eval_instances
from .metrics import DEFAULT_KS, RankingMetrics, evaluate_ranking


def score_instances(model: IDSTCL, params: ModelParams, instances: Sequence[EvalInstance],
                    split: str = "test", chunk: int = 8) -> np.ndarray:
    """Click logits, shape ``(n_instances, n_candidates)``; higher means more likely."""
    L = model.config.max_len
    out = []
    for start in range(0, len(instances), chunk):
        part = instances[start:start + chunk]
        dom = part[0].domain
        rows = [eval_inputs(inst, L, split) for inst in part]
        n_c = rows[0][0].shape[0]
        ids = np.concatenate([r[0] for r in rows])
        mask = np.concatenate([r[1] for r in rows])
        mi = np.concatenate([r[2] for r in rows])
        mm = np.concatenate([r[3] for r in rows])
        md = np.concatenate([r[4] for r in rows])
        side_idx, side_w = _side_arrays([r[5] for r in rows])
        h_dom = model.encode(params, dom, ids, mask)
        h_M = np.repeat(model.encode(params, "M", mi, mm, md), n_c, axis=0)
        side = np.repeat(model.side_embedding(params, dom, side_idx, side_w), n_c, axis=0)
        z = model.head_logits(params, dom, h_dom, h_M, side)
        out.append(z.reshape(len(part), n_c))
    return np.concatenate(out) if out else np.zeros((0, 0))


def evaluate_model(model: IDSTCL, params: ModelParams, clients: Sequence[ClientData],
                   n_items: Dict[str, int], seed: int = 0, split: str = "test",
                   ks: Sequence[int] = DEFAULT_KS) -> Dict[str, RankingMetrics]:
    """NDCG/MRR per domain over every client's held-out item and 99 sampled negatives."""
    res = {}
    for d in DOMAINS:
        inst = eval_instances(clients, d, split, seed, n_items[d])
        scores = score_instances(model, params, inst, split)
        ids = np.stack([i.candidates for i in inst])
        res[d] = evaluate_ranking(scores, ids, ks)
    return res


def metric_rows(name: str, results: Dict[str, RankingMetrics]) -> List[Tuple[str, str, RankingMetrics]]:
    return [(name, d, results[d]) for d in sorted(results)]
