"""Per-client local datasets (augmented training instances) and padded model batches.

A training instance pairs one domain-A and one domain-B example.  Each side
has an original history, an augmented history (original + expanded
positives), a target item and a click label.  Positives come from every
prefix of the user's training sequence; each positive gets one sampled
negative with the same history, and LLM negatives become label-0 targets
after the full training history.  The mixed-domain input of a pair is the
chronological merge of its two histories followed by the expanded positives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import DOMAINS, SplitDataset
from .idst_cl import ItemFeatures, ModelBatch, Vocab, pad_left
from .metrics import N_NEGATIVES, EvaluationError, sample_negatives
from .privaugnet.pipeline import AugmentedDataset, SequenceExpansion, merge_expansion

UNKNOWN = "<unk>"
_DOM_RANK = {"A": 0, "B": 1}


@dataclass(frozen=True)
class Example:
    history: Tuple[int, ...]        # original item indices
    history_ts: Tuple[int, ...]
    target: int
    label: float


@dataclass
class ClientData:
    """The local dataset of one user; never mutated after construction."""

    user: str
    client_id: int
    examples: Dict[str, Tuple[Example, ...]]
    expanded: Dict[str, Tuple[int, ...]]
    side: Tuple[int, ...]
    full_history: Dict[str, Tuple[int, ...]]       # train + valid (evaluation context)
    full_history_ts: Dict[str, Tuple[int, ...]]
    valid: Dict[str, int]
    test: Dict[str, int]
    seen: Dict[str, frozenset]                     # every item the user interacted with

    def __len__(self) -> int:
        return max(len(self.examples["A"]), len(self.examples["B"]))

    def n_pairs(self) -> int:
        return len(self)


class Featurizer:
    """Maps string ids and augmentation tags to embedding-table indices."""

    def __init__(self, split: SplitDataset, aug: Optional[AugmentedDataset] = None) -> None:
        self.split = split
        self.aug = aug or AugmentedDataset()
        self.item_index = {d: split.item_index(d) for d in DOMAINS}
        self.feat_vocab: Dict[str, Dict[str, int]] = {}
        feat_lists: Dict[str, List[List[int]]] = {}
        for d in DOMAINS:
            tags = sorted({t for (dom, _), it in self.aug.items.items() if dom == d for t in it.tags()})
            vocab = {UNKNOWN: 0, **{t: i + 1 for i, t in enumerate(tags)}}
            self.feat_vocab[d] = vocab
            lists = []
            for item in split.catalogs[d]:
                it = self.aug.items.get((d, item))
                ids = [vocab[t] for t in it.tags()] if it is not None else []
                lists.append(ids or [0])
            feat_lists[d] = lists
        self.features = ItemFeatures.from_lists(feat_lists)
        side_tags = sorted({t for p in self.aug.profiles.values() for t in p.tags()})
        self.side_vocab = {UNKNOWN: 0, **{t: i + 1 for i, t in enumerate(side_tags)}}
        self.vocab = Vocab(len(split.catalogs["A"]), len(split.catalogs["B"]),
                           len(self.feat_vocab["A"]), len(self.feat_vocab["B"]), len(self.side_vocab))

    def client_data(self, user: str, client_id: int, seed: int = 0) -> ClientData:
        s = self.split.splits[user]
        aug_exp = self.aug.expansions.get(user, SequenceExpansion())
        profile = self.aug.profiles.get(user)
        rng = np.random.default_rng([seed, client_id, 11])
        examples, expanded, full_hist, full_ts, valid, test, seen = {}, {}, {}, {}, {}, {}, {}
        for d in DOMAINS:
            idx = self.item_index[d]
            train = [idx[e.item] for e in s[d].train.events]
            train_ts = [e.ts for e in s[d].train.events]
            all_items = {idx[e.item] for e in self.split.history(user, d)}
            seen[d] = frozenset(all_items)
            expanded[d] = tuple(idx[i] for i in aug_exp.positives(d) if i in idx)
            n_items = len(self.split.catalogs[d])
            exclude = all_items | set(expanded[d])
            exs = []
            starts = range(1, len(train)) if len(train) > 1 else range(0, 1)
            negs = _training_negatives(rng, n_items, exclude, len(starts))
            for p, neg in zip(starts, negs):
                hist, hts = tuple(train[:p]), tuple(train_ts[:p])
                exs.append(Example(hist, hts, train[p], 1.0))
                exs.append(Example(hist, hts, int(neg), 0.0))
            for item in aug_exp.negatives(d):
                if item in idx and idx[item] not in all_items:
                    exs.append(Example(tuple(train), tuple(train_ts), idx[item], 0.0))
            examples[d] = tuple(exs)
            full_hist[d] = tuple(train + [idx[s[d].valid.item]])
            full_ts[d] = tuple(train_ts + [s[d].valid.ts])
            valid[d] = idx[s[d].valid.item]
            test[d] = idx[s[d].test.item]
        side = tuple(self.side_vocab[t] for t in profile.tags()) if profile is not None else ()
        return ClientData(user, client_id, examples, expanded, side or (0,), full_hist, full_ts, valid, test, seen)

    def all_clients(self, seed: int = 0) -> List[ClientData]:
        return [self.client_data(u, i, seed) for i, u in enumerate(self.split.users)]


def _training_negatives(rng: np.random.Generator, n_items: int, exclude: set, n: int) -> np.ndarray:
    """One unseen item per training prefix; distinct when the catalog allows, else drawn with replacement."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pool = np.setdiff1d(np.arange(n_items), np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
    if pool.size >= n:
        return sample_negatives(rng, n_items, exclude, n)
    if pool.size == 0:
        raise EvaluationError("user has interacted with every item; no negatives available")
    return rng.choice(pool, size=n, replace=True)


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def mixed_sequence(hist_a: Sequence[int], ts_a: Sequence[int], hist_b: Sequence[int], ts_b: Sequence[int],
                   exp_a: Sequence[int] = (), exp_b: Sequence[int] = ()) -> Tuple[List[int], List[int]]:
    """Chronological merge (ties: A first, then item index) followed by expanded positives."""
    ev = [(t, 0, i) for t, i in zip(ts_a, hist_a)] + [(t, 1, i) for t, i in zip(ts_b, hist_b)]
    ev.sort()
    ids = [i for _, _, i in ev] + list(exp_a) + list(exp_b)
    doms = [d for _, d, _ in ev] + [0] * len(exp_a) + [1] * len(exp_b)
    return ids, doms


def _side_arrays(sides: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in sides)
    idx = np.zeros((len(sides), width), dtype=np.int64)
    w = np.zeros((len(sides), width))
    for r, s in enumerate(sides):
        idx[r, :len(s)] = s
        w[r, :len(s)] = 1.0 / len(s)
    return idx, w


def make_batch(client: ClientData, pairs: Sequence[Tuple[int, int]], max_len: int) -> ModelBatch:
    """Padded batch for (A-example index, B-example index) pairs of one client."""
    seqs = {"A": ([], []), "B": ([], [])}
    m_ids, m_doms, ya, yb = [], [], [], []
    for ia, ib in pairs:
        ea, eb = client.examples["A"][ia], client.examples["B"][ib]
        for d, ex in (("A", ea), ("B", eb)):
            aug = merge_expansion(ex.history, client.expanded[d])
            seqs[d][0].append(list(aug) + [ex.target])
            seqs[d][1].append(list(ex.history) + [ex.target])
        ids, doms = mixed_sequence(ea.history, ea.history_ts, eb.history, eb.history_ts,
                                   client.expanded["A"], client.expanded["B"])
        if not ids:
            # both histories empty: fall back to the two candidates, as the domain encoders see them
            ids, doms = [ea.target, eb.target], [0, 1]
        m_ids.append(ids)
        m_doms.append(doms)
        ya.append(ea.label)
        yb.append(eb.label)
    a_ids, a_mask = pad_left(seqs["A"][0] + seqs["A"][1], max_len)
    b_ids, b_mask = pad_left(seqs["B"][0] + seqs["B"][1], max_len)
    mi, mm, md = pad_left(m_ids, max_len, m_doms)
    side_idx, side_w = _side_arrays([client.side] * len(pairs))
    return ModelBatch(a_ids, a_mask, b_ids, b_mask, mi, md, mm, side_idx, side_w,
                      np.asarray(ya, dtype=np.float64), np.asarray(yb, dtype=np.float64))


def sample_local_batch(client: ClientData, rng: np.random.Generator, batch_size: int, max_len: int) -> ModelBatch:
    """Uniform mini-batch of example pairs (without replacement when the pool allows)."""
    na, nb = len(client.examples["A"]), len(client.examples["B"])
    if na == 0 or nb == 0:
        raise ValueError(f"client {client.user} has an empty local dataset")
    ia = rng.choice(na, size=batch_size, replace=na < batch_size)
    ib = rng.choice(nb, size=batch_size, replace=nb < batch_size)
    return make_batch(client, list(zip(ia.tolist(), ib.tolist())), max_len)


@dataclass
class EvalInstance:
    """One user/domain ranking task: candidate 0 is the held-out positive."""

    client: ClientData
    domain: str
    candidates: np.ndarray


def eval_instances(clients: Sequence[ClientData], domain: str, split: str = "test", seed: int = 0,
                   n_items: Optional[int] = None, n_negatives: int = N_NEGATIVES) -> List[EvalInstance]:
    """Positive + ``n_negatives`` never-interacted items, seeded per (user, domain, split)."""
    out = []
    dom_code = _DOM_RANK[domain]
    split_code = 0 if split == "test" else 1
    for c in clients:
        pos = c.test[domain] if split == "test" else c.valid[domain]
        rng = np.random.default_rng([seed, c.client_id, dom_code, split_code, 99])
        negs = sample_negatives(rng, n_items, c.seen[domain], n_negatives)
        out.append(EvalInstance(c, domain, np.concatenate([[pos], negs]).astype(np.int64)))
    return out


def eval_inputs(inst: EvalInstance, max_len: int, split: str = "test"):
    """Arrays for scoring all candidates of one instance: (dom ids, dom mask, mixed ids/mask/doms, side)."""
    c, d = inst.client, inst.domain
    if split == "test":
        hist = {x: list(c.full_history[x]) for x in DOMAINS}
        ts = {x: list(c.full_history_ts[x]) for x in DOMAINS}
    else:
        hist = {x: list(c.full_history[x][:-1]) for x in DOMAINS}
        ts = {x: list(c.full_history_ts[x][:-1]) for x in DOMAINS}
    aug = merge_expansion(hist[d], c.expanded[d])
    ids, mask = pad_left([list(aug) + [int(t)] for t in inst.candidates], max_len)
    m, md = mixed_sequence(hist["A"], ts["A"], hist["B"], ts["B"], c.expanded["A"], c.expanded["B"])
    mi, mm, mdo = pad_left([m], max_len, [md])
    return ids, mask, mi, mm, mdo, c.side
