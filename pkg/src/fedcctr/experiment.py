"""End-to-end pipeline pieces shared by the command line and the acceptance suite."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .adaldp import PrivacyState, matched_static_sigma
from .config import ExperimentConfig
from .data import (
    DOMAINS,
    Interaction,
    SplitDataset,
    SyntheticConfig,
    generate_synthetic,
    load_interactions,
    load_item_meta,
    preprocess,
)
from .evaluation import evaluate_model
from .fed_runtime import ClientState, FedConfig, TrainingResult, Transport, run_training
from .idst_cl import IDSTCL, ModelConfig, ModelParams
from .instances import Featurizer
from .metrics import RankingMetrics
from .privaugnet import AugmentedDataset, CachedChatClient, HTTPChatClient, MockChatClient, run_privaugnet

log = logging.getLogger(__name__)

ARMS = ("full", "no-privaugnet", "no-idra", "no-cdrd", "no-adaldp", "static-ldp")


def synthetic_config(cfg: ExperimentConfig) -> SyntheticConfig:
    d = cfg.data
    return SyntheticConfig(users=d.users, items_per_domain=d.items_per_domain, latent_dim=d.latent_dim,
                           sparsity=d.sparsity, seed=cfg.seed, categories=d.categories,
                           popularity_skew=d.popularity_skew, noise=d.noise)


def raw_dataset(cfg: ExperimentConfig) -> Tuple[List[Interaction], Dict[Tuple[str, str], dict]]:
    """Interactions and item metadata from the configured source."""
    if cfg.data.source == "synthetic":
        records, meta = generate_synthetic(synthetic_config(cfg))
        return records, {(m["domain"], m["item"]): m for m in meta}
    records = load_interactions(Path(cfg.data.interactions))
    meta = load_item_meta(Path(cfg.data.item_meta)) if cfg.data.item_meta else {}
    return records, meta


def split_dataset(cfg: ExperimentConfig, records: Sequence[Interaction],
                  meta: Dict[Tuple[str, str], dict]) -> SplitDataset:
    d = cfg.data
    return preprocess(records, d.min_user_interactions, d.min_item_frequency, d.min_domain_events, meta)


def llm_client(cfg: ExperimentConfig, cache_dir: Optional[Path] = None):
    a = cfg.augmentation
    if a.backend == "mock":
        inner = MockChatClient(cfg.seed)
    else:
        inner = HTTPChatClient(timeout=a.timeout)
    cache = cache_dir if cache_dir is not None else (Path(a.cache_dir) if a.cache_dir else None)
    return CachedChatClient(inner, cache, salt=a.backend) if cache is not None else inner


def augment(cfg: ExperimentConfig, split: SplitDataset, client=None) -> AugmentedDataset:
    a = cfg.augmentation
    client = client if client is not None else llm_client(cfg)
    return run_privaugnet(split, client, a.candidates, cfg.seed, cfg.threads, a.temperature, a.top_p)


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(m.d_id, m.d_feat, m.d_pos, m.d_other, m.heads, m.ffn_mult, tuple(m.mlp_widths),
                       m.dropout, m.max_len, m.lambda1, m.lambda2, m.alpha, m.tau)


def fed_config(cfg: ExperimentConfig) -> FedConfig:
    f = cfg.federation
    return FedConfig(rounds=f.rounds, eta=f.eta, rho=f.rho, batch_size=f.batch_size, local_steps=f.local_steps,
                     optimizer=f.optimizer, weight_decay=f.weight_decay, seed=cfg.seed, threads=cfg.threads)


def privacy_state(cfg: ExperimentConfig) -> PrivacyState:
    """Initial accountant state; a disabled mechanism is noise-free, unclipped and unlimited."""
    p, f = cfg.privacy, cfg.federation
    if not p.enabled:
        return PrivacyState(sigma_0=0.0, epsilon_0=math.inf, delta=p.delta, zeta=p.zeta, rho=f.rho,
                            theta=math.inf, decay=1.0, mode=p.mode, accountant=p.accountant)
    return PrivacyState(sigma_0=p.sigma_0, epsilon_0=p.epsilon, delta=p.delta, zeta=p.zeta, rho=f.rho,
                        theta=p.theta, decay=p.decay, mode=p.mode, accountant=p.accountant)


def make_static(cfg: ExperimentConfig) -> ExperimentConfig:
    """Constant-noise variant spending the same total RDP over the run as the decaying schedule."""
    out = copy.deepcopy(cfg)
    p = out.privacy
    if p.decay != 1.0 and p.sigma_0 > 0 and out.federation.rounds > 0:
        p.sigma_0 = matched_static_sigma(p.sigma_0, p.decay, out.federation.rounds, p.theta,
                                         out.federation.rho, p.zeta, p.accountant)
    p.decay = 1.0
    return out


def arm_config(cfg: ExperimentConfig, arm: str) -> ExperimentConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
    out = copy.deepcopy(cfg)
    if arm == "no-privaugnet":
        out.augmentation.enabled = False
    elif arm == "no-idra":
        out.model.lambda1 = 0.0
    elif arm == "no-cdrd":
        out.model.lambda2 = 0.0
    elif arm == "no-adaldp":
        out.privacy.enabled = False
    elif arm == "static-ldp":
        out = make_static(out)
    return out


@dataclass
class TrainedRun:
    cfg: ExperimentConfig
    model: IDSTCL
    featurizer: Featurizer
    result: TrainingResult

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.model.shapes, self.result.model.params)

    def evaluate(self, split: str = "test") -> Dict[str, RankingMetrics]:
        f = self.featurizer
        return evaluate_model(self.model, self.params, [c.data for c in self.result.clients],
                              {d: len(f.split.catalogs[d]) for d in DOMAINS}, self.cfg.seed, split,
                              tuple(self.cfg.evaluation.ks))


def build_model(cfg: ExperimentConfig, split: SplitDataset,
                aug: Optional[AugmentedDataset]) -> Tuple[IDSTCL, Featurizer]:
    fz = Featurizer(split, aug if cfg.augmentation.enabled else None)
    return IDSTCL(model_config(cfg), fz.vocab, fz.features), fz


def train(cfg: ExperimentConfig, split: SplitDataset, aug: Optional[AugmentedDataset],
          transport: Optional[Transport] = None, record_timing: bool = False) -> TrainedRun:
    model, fz = build_model(cfg, split, aug)
    clients = [ClientState(c, privacy_state(cfg)) for c in fz.all_clients(cfg.seed)]
    result = run_training(model, clients, fed_config(cfg), transport=transport, record_timing=record_timing)
    return TrainedRun(cfg, model, fz, result)


def mean_ndcg(results: Dict[str, RankingMetrics], k: int = 10) -> float:
    return sum(results[d].ndcg_at[k] for d in DOMAINS) / len(DOMAINS)
