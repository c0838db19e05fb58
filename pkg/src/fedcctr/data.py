"""Interaction data: records, chronological sequences, preprocessing and splits.

Raw interactions are JSON-lines records ``{user, item, domain, rating, ts}``
with ``domain`` in ``{"A", "B"}``.  Optional item metadata lives in a second
JSON-lines file ``{item, domain, title, category}``.
"""

from __future__ import annotations

import gzip
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

DOMAINS = ("A", "B")


class DataError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Event:
    ts: int
    domain: str
    item: str

    def to_dict(self) -> dict:
        return {"item": self.item, "domain": self.domain, "ts": self.ts}


@dataclass(frozen=True)
class InteractionSequence:
    """One user's time-ordered events in a single domain (A/B) or mixed (M)."""

    user_id: str
    events: Tuple[Event, ...]
    domain: str = "M"

    def __post_init__(self) -> None:
        ts = [e.ts for e in self.events]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise DataError(f"events for user {self.user_id} are not in chronological order")
        if self.domain in DOMAINS and any(e.domain != self.domain for e in self.events):
            raise DataError(f"sequence tagged {self.domain} holds events from another domain")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def items(self) -> List[str]:
        return [e.item for e in self.events]


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    domain: str
    rating: float
    ts: int

    @classmethod
    def from_dict(cls, d: Mapping) -> "Interaction":
        try:
            return cls(str(d["user"]), str(d["item"]), str(d["domain"]), float(d.get("rating", 1.0)), int(d["ts"]))
        except KeyError as exc:
            raise DataError(f"interaction record missing field {exc}") from None


@dataclass
class UserSplit:
    """Leave-one-out split of one user's sequence in one domain."""

    train: InteractionSequence
    valid: Event
    test: Event


@dataclass
class SplitDataset:
    users: List[str]
    splits: Dict[str, Dict[str, UserSplit]]  # user -> domain -> split
    catalogs: Dict[str, List[str]]  # domain -> sorted item ids
    item_meta: Dict[Tuple[str, str], dict] = field(default_factory=dict)

    def history(self, user: str, domain: str) -> List[Event]:
        """All events of ``user`` in ``domain`` (train + valid + test)."""
        s = self.splits[user][domain]
        return list(s.train.events) + [s.valid, s.test]

    def item_index(self, domain: str) -> Dict[str, int]:
        return {item: i for i, item in enumerate(self.catalogs[domain])}


# ---------------------------------------------------------------------------
# IO
# ---------------------------------------------------------------------------

def read_jsonl(path: Path) -> Iterator[dict]:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: Path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_interactions(path: Path) -> List[Interaction]:
    return [Interaction.from_dict(d) for d in read_jsonl(path)]


def load_item_meta(path: Optional[Path]) -> Dict[Tuple[str, str], dict]:
    if path is None or not Path(path).exists():
        return {}
    return {(str(d["domain"]), str(d["item"])): d for d in read_jsonl(path)}


def convert_amazon_reviews(path: Path, domain: str) -> List[Interaction]:
    """Convert an Amazon review dump (``reviewerID``, ``asin``, ``overall``, ``unixReviewTime``)."""
    out = []
    for d in read_jsonl(path):
        out.append(Interaction(str(d["reviewerID"]), str(d["asin"]), domain,
                               float(d.get("overall", 1.0)), int(d["unixReviewTime"])))
    return out


# ---------------------------------------------------------------------------
# Sequences and splits
# ---------------------------------------------------------------------------

def build_mixed_sequence(seq_a: InteractionSequence, seq_b: InteractionSequence) -> InteractionSequence:
    """Chronological merge of a user's A and B sequences; ties go A first, then by item id."""
    rank = {"A": 0, "B": 1}
    events = sorted(seq_a.events + seq_b.events, key=lambda e: (e.ts, rank.get(e.domain, 2), e.item))
    return InteractionSequence(seq_a.user_id or seq_b.user_id, tuple(events), "M")


def leave_one_out(seq: InteractionSequence) -> UserSplit:
    if len(seq) < 3:
        raise DataError(f"user {seq.user_id} needs at least 3 events in domain {seq.domain}")
    ev = seq.events
    return UserSplit(InteractionSequence(seq.user_id, ev[:-2], seq.domain), ev[-2], ev[-1])


def preprocess(records: Sequence[Interaction], min_user_interactions: int = 10,
               min_item_frequency: int = 10, min_domain_events: int = 3,
               item_meta: Optional[Dict[Tuple[str, str], dict]] = None) -> SplitDataset:
    """Filter, order and split raw interactions.

    Items must occur strictly more than ``min_item_frequency`` times and users
    must keep strictly more than ``min_user_interactions`` events in total
    after item filtering, with at least ``min_domain_events`` in each domain
    (three events are needed for the leave-one-out split).  Every rating counts
    as a click.  A single filtering pass is applied, items first.
    """
    records = [r for r in records if r.domain in DOMAINS]
    freq = Counter((r.domain, r.item) for r in records)
    kept = [r for r in records if freq[(r.domain, r.item)] > min_item_frequency]

    per_user: Dict[str, Dict[str, List[Event]]] = defaultdict(lambda: {d: [] for d in DOMAINS})
    for r in kept:
        per_user[r.user][r.domain].append(Event(r.ts, r.domain, r.item))

    users, splits = [], {}
    for user in sorted(per_user):
        doms = per_user[user]
        total = sum(len(v) for v in doms.values())
        if total <= min_user_interactions or any(len(doms[d]) < max(min_domain_events, 3) for d in DOMAINS):
            continue
        users.append(user)
        splits[user] = {
            d: leave_one_out(InteractionSequence(user, tuple(sorted(doms[d], key=lambda e: (e.ts, e.item))), d))
            for d in DOMAINS
        }

    catalogs = {}
    for d in DOMAINS:
        items = {e.item for u in users for e in list(splits[u][d].train.events) + [splits[u][d].valid, splits[u][d].test]}
        catalogs[d] = sorted(items)
    if not users:
        raise DataError("no users survive preprocessing")
    return SplitDataset(users, splits, catalogs, dict(item_meta or {}))


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

CATEGORY_NAMES = (
    "mystery", "romance", "science", "history", "fantasy", "biography", "comedy", "drama",
    "adventure", "horror", "documentary", "family", "thriller", "poetry", "travel", "cooking",
)


@dataclass
class SyntheticConfig:
    users: int = 200
    items_per_domain: int = 500
    latent_dim: int = 8
    sparsity: float = 0.97
    seed: int = 0
    categories: int = 8
    popularity_skew: float = 1.0
    noise: float = 0.5

    def validate(self) -> None:
        if self.users < 2 or self.items_per_domain < 2 or self.latent_dim < 1:
            raise DataError("synthetic counts must be >= 2 (latent_dim >= 1)")
        if not 0.0 < self.sparsity < 1.0:
            raise DataError(f"sparsity must be in (0, 1), got {self.sparsity}")
        n = self.n_events_per_domain
        if n < self.users or n > self.users * self.items_per_domain:
            raise DataError(
                f"sparsity {self.sparsity} is infeasible: {n} events per domain cannot give "
                f"each of {self.users} users at least one event")
        if not 1 <= self.categories <= len(CATEGORY_NAMES):
            raise DataError(f"categories must be in [1, {len(CATEGORY_NAMES)}]")

    @property
    def n_events_per_domain(self) -> int:
        return int(round((1.0 - self.sparsity) * self.users * self.items_per_domain))


def generate_synthetic(cfg: SyntheticConfig) -> Tuple[List[Interaction], List[dict]]:
    """Latent-factor cross-domain click corpus.

    Users share one latent taste vector across both domains; items carry a
    latent vector near their category centroid and a popularity bias.  Per
    domain the ``n`` highest-affinity (user, item) pairs become clicks, where
    ``n`` is fixed by the target sparsity, after first forcing each user's
    single best item so that every user is present in both domains.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    U, I, k = cfg.users, cfg.items_per_domain, cfg.latent_dim
    user_vec = rng.standard_normal((U, k))
    n_events = cfg.n_events_per_domain
    records: List[Interaction] = []
    meta: List[dict] = []
    for dom in DOMAINS:
        centroids = rng.standard_normal((cfg.categories, k))
        cat = rng.integers(0, cfg.categories, size=I)
        item_vec = centroids[cat] + 0.5 * rng.standard_normal((I, k))
        # Zipf-like popularity over a random item order
        pop_rank = rng.permutation(I)
        bias = -cfg.popularity_skew * np.log1p(pop_rank)
        affinity = (user_vec @ item_vec.T) / math.sqrt(k) + bias[None, :] \
            + cfg.noise * rng.gumbel(size=(U, I))
        chosen = np.zeros((U, I), dtype=bool)
        chosen[np.arange(U), np.argmax(affinity, axis=1)] = True
        remaining = n_events - U
        if remaining > 0:
            flat = np.where(chosen, -np.inf, affinity).ravel()
            top = np.argpartition(-flat, remaining - 1)[:remaining]
            chosen.ravel()[top] = True
        uu, ii = np.nonzero(chosen)
        ts = rng.integers(0, 10**6, size=uu.size)
        for u, i, t in zip(uu.tolist(), ii.tolist(), ts.tolist()):
            records.append(Interaction(f"u{u:05d}", f"{dom}{i:05d}", dom, 5.0, int(t)))
        for i in range(I):
            meta.append({"item": f"{dom}{i:05d}", "domain": dom,
                         "title": f"{CATEGORY_NAMES[cat[i]].title()} title {dom}{i:05d}",
                         "category": CATEGORY_NAMES[cat[i]]})
    records.sort(key=lambda r: (r.user, r.domain, r.ts, r.item))
    return records, meta


def realized_sparsity(records: Sequence[Interaction], users: int, items_per_domain: int, domain: str) -> float:
    n = len({(r.user, r.item) for r in records if r.domain == domain})
    return 1.0 - n / (users * items_per_domain)


def dataset_stats(ds: SplitDataset, augmented_lengths: Optional[Dict[str, float]] = None) -> dict:
    """Summary mirroring the usual cross-domain dataset table (counts, lengths, sparsity)."""
    stats: dict = {"common_users": len(ds.users)}
    for d in DOMAINS:
        lens = [len(ds.history(u, d)) for u in ds.users]
        n_items = len(ds.catalogs[d])
        avg = float(np.mean(lens)) if lens else 0.0
        stats[d] = {
            "unique_items": n_items,
            "ori_avg_seq_len": round(avg, 4),
            "ori_sparsity": round(1.0 - sum(lens) / max(1, n_items * len(ds.users)), 6),
        }
        if augmented_lengths is not None:
            aug = augmented_lengths[d]
            stats[d]["aug_avg_seq_len"] = round(aug, 4)
            stats[d]["aug_sparsity"] = round(1.0 - aug * len(ds.users) / max(1, n_items * len(ds.users)), 6)
    return stats
