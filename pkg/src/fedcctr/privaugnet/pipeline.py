"""Three-stage augmentation: item features, user profile, sequence expansion."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..data import DOMAINS, SplitDataset, build_mixed_sequence, read_jsonl, write_jsonl
from .llm import ChatClient, LLMTransportError, llm_chat
from .prompts import (
    AGE_BRACKETS,
    GENDERS,
    GENRES,
    ITEM_TEMPLATE,
    KEYWORDS,
    SEQUENCE_TEMPLATE,
    THEMES,
    USER_TEMPLATE,
    PromptTemplate,
    item_template_values,
    user_template_values,
)

log = logging.getLogger(__name__)

DEFAULT_CANDIDATES = 10
MAX_PARSE_RETRIES = 2


class AugmentationError(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass
class AugmentedItem:
    item_id: str
    domain: str
    genres: List[str] = field(default_factory=list)
    themes: List[str] = field(default_factory=list)
    keywords: List[str] = field(default_factory=list)
    category: str = ""

    @property
    def is_empty(self) -> bool:
        return not (self.genres or self.themes or self.keywords or self.category)

    def tags(self) -> List[str]:
        """Feature tokens used by the item-feature embedding."""
        out = [f"genre:{g}" for g in self.genres] + [f"theme:{t}" for t in self.themes]
        out += [f"kw:{k}" for k in self.keywords]
        if self.category:
            out.append(f"cat:{self.category}")
        return out


@dataclass
class AugmentedUserProfile:
    user_id: str
    age_bracket: str = ""
    gender: str = ""
    preference_summary: List[str] = field(default_factory=list)

    def tags(self) -> List[str]:
        out = []
        if self.age_bracket:
            out.append(f"age:{self.age_bracket}")
        if self.gender:
            out.append(f"gender:{self.gender}")
        out += [f"pref:{p}" for p in self.preference_summary]
        return out


@dataclass
class SequenceExpansion:
    positives_A: List[str] = field(default_factory=list)
    positives_B: List[str] = field(default_factory=list)
    negatives_A: List[str] = field(default_factory=list)
    negatives_B: List[str] = field(default_factory=list)

    def positives(self, domain: str) -> List[str]:
        return self.positives_A if domain == "A" else self.positives_B

    def negatives(self, domain: str) -> List[str]:
        return self.negatives_A if domain == "A" else self.negatives_B


@dataclass
class AugmentationLog:
    warnings: List[str] = field(default_factory=list)
    fallbacks: int = 0
    dropped_ids: int = 0

    def warn(self, msg: str) -> None:
        log.warning(msg)
        self.warnings.append(msg)


# ---------------------------------------------------------------------------
# Reply parsing
# ---------------------------------------------------------------------------

_JSON_OBJ = re.compile(r"\{.*\}", re.DOTALL)


def parse_json_reply(text: str) -> dict:
    m = _JSON_OBJ.search(text or "")
    if not m:
        raise ValueError("no JSON object in reply")
    data = json.loads(m.group(0))
    if not isinstance(data, dict):
        raise ValueError("reply is not a JSON object")
    return data


def _vocab_list(value, vocab: Sequence[str], limit: int = 3) -> List[str]:
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list):
        return []
    seen = []
    for v in value:
        v = str(v).strip().lower()
        if v in vocab and v not in seen:
            seen.append(v)
    return seen[:limit]


def _ask(template: PromptTemplate, client: ChatClient, parse, alog: AugmentationLog, what: str,
         retries: int = MAX_PARSE_RETRIES, **values: str):
    """Render, send and parse; retry on malformed replies, then return None."""
    for attempt in range(retries + 1):
        reply = llm_chat(template.request(attempt=attempt, **values), client)
        try:
            return parse(parse_json_reply(reply.text))
        except (ValueError, KeyError, TypeError) as exc:
            alog.warn(f"{what}: malformed reply on attempt {attempt + 1} ({exc})")
    alog.fallbacks += 1
    alog.warn(f"{what}: falling back to empty augmentation")
    return None


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def augment_item(item: dict, template: PromptTemplate, client: ChatClient,
                 alog: Optional[AugmentationLog] = None) -> AugmentedItem:
    """Structured features for one catalog item (``item`` needs ``item``, ``domain``, ``title``)."""
    alog = alog if alog is not None else AugmentationLog()
    title = item.get("title") or item.get("name")
    if not title:
        raise PreconditionError(f"item {item.get('item')!r} has no title")
    item_id, domain = str(item["item"]), str(item["domain"])
    payload = {"title": title}
    if item.get("category"):
        payload["category"] = item["category"]

    def parse(d: dict) -> AugmentedItem:
        out = AugmentedItem(item_id, domain, _vocab_list(d["genres"], GENRES), _vocab_list(d["themes"], THEMES),
                            _vocab_list(d["keywords"], KEYWORDS))
        cat = str(d.get("category", "")).strip().lower()
        out.category = cat if cat in GENRES else ""
        if out.is_empty:
            raise ValueError("no usable fields")
        return out

    domain_name = {"A": "domain A", "B": "domain B"}.get(domain, domain)
    res = _ask(template, client, parse, alog, f"item {item_id}", domain_name=domain_name,
               item_json=json.dumps(payload, sort_keys=True), **item_template_values())
    return res if res is not None else AugmentedItem(item_id, domain)


def augment_user(user_id: str, mixed_items: Sequence[AugmentedItem], template: PromptTemplate,
                 client: ChatClient, alog: Optional[AugmentationLog] = None) -> AugmentedUserProfile:
    alog = alog if alog is not None else AugmentationLog()
    if not mixed_items:
        raise PreconditionError(f"user {user_id} has an empty mixed sequence")
    history = [{"item": it.item_id, "domain": it.domain, "genres": it.genres, "themes": it.themes}
               for it in mixed_items]

    def parse(d: dict) -> AugmentedUserProfile:
        age = str(d["age_bracket"]).strip()
        gender = str(d["gender"]).strip().lower()
        if age not in AGE_BRACKETS or gender not in GENDERS:
            raise ValueError("profile field outside vocabulary")
        return AugmentedUserProfile(user_id, age, gender, _vocab_list(d.get("preference_summary", []), GENRES))

    res = _ask(template, client, parse, alog, f"user {user_id}",
               history_json=json.dumps(history, sort_keys=True), **user_template_values())
    return res if res is not None else AugmentedUserProfile(user_id)


def sample_candidates(catalog: Sequence[str], size: int, history: Iterable[str],
                      rng: np.random.Generator) -> List[str]:
    """Uniform sample without replacement from ``catalog`` minus ``history`` (catalog order kept)."""
    seen = set(history)
    pool = [c for c in catalog if c not in seen]
    if size > len(pool):
        raise PreconditionError(f"catalog too small: {len(pool)} eligible items for |C|={size}")
    idx = np.sort(rng.choice(len(pool), size=size, replace=False))
    return [pool[i] for i in idx]


def expand_sequence(profile: AugmentedUserProfile, mixed_items: Sequence[AugmentedItem],
                    cand_a: Sequence[str], cand_b: Sequence[str], template: PromptTemplate,
                    client: ChatClient, alog: Optional[AugmentationLog] = None,
                    describe: Optional[Dict[Tuple[str, str], AugmentedItem]] = None) -> SequenceExpansion:
    """Positive/negative picks from the candidate sets; ids outside them are dropped.

    With ``describe`` the candidates are shown with their augmented genres,
    otherwise as bare ids.
    """
    alog = alog if alog is not None else AugmentationLog()
    if not cand_a or not cand_b:
        raise PreconditionError("candidate sets must be non-empty")
    allowed = {"A": list(cand_a), "B": list(cand_b)}

    def parse(d: dict) -> SequenceExpansion:
        exp = SequenceExpansion()
        for dom in DOMAINS:
            ok = set(allowed[dom])
            pos_raw = [str(x) for x in d[f"positives_{dom}"]]
            neg_raw = [str(x) for x in d[f"negatives_{dom}"]]
            pos = list(dict.fromkeys(x for x in pos_raw if x in ok))
            neg = list(dict.fromkeys(x for x in neg_raw if x in ok and x not in pos))
            dropped = (len(pos_raw) - sum(x in ok for x in pos_raw)) + (len(neg_raw) - sum(x in ok for x in neg_raw))
            if dropped:
                alog.dropped_ids += dropped
                alog.warn(f"user {profile.user_id}: dropped {dropped} id(s) outside candidate set {dom}")
            setattr(exp, f"positives_{dom}", pos)
            setattr(exp, f"negatives_{dom}", neg)
        return exp

    history = [{"item": it.item_id, "domain": it.domain, "genres": it.genres} for it in mixed_items]
    res = _ask(template, client, parse, alog, f"expansion {profile.user_id}",
               profile_json=json.dumps(asdict(profile), sort_keys=True),
               history_json=json.dumps(history, sort_keys=True),
               candidates_a=_candidate_json("A", cand_a, describe),
               candidates_b=_candidate_json("B", cand_b, describe))
    return res if res is not None else SequenceExpansion()


def _candidate_json(domain: str, ids: Sequence[str],
                    describe: Optional[Dict[Tuple[str, str], AugmentedItem]]) -> str:
    if describe is None:
        return json.dumps(list(ids))
    return json.dumps([{"item": i, "genres": describe[(domain, i)].genres if (domain, i) in describe else []}
                       for i in ids], sort_keys=True)


def merge_expansion(original: Sequence[str], positives: Sequence[str]) -> List[str]:
    """Original items in order, then expanded positives; duplicates keep their first occurrence."""
    return list(dict.fromkeys(list(original) + list(positives)))


# ---------------------------------------------------------------------------
# Whole-dataset pipeline
# ---------------------------------------------------------------------------

@dataclass
class AugmentedDataset:
    items: Dict[Tuple[str, str], AugmentedItem] = field(default_factory=dict)  # (domain, item) -> features
    profiles: Dict[str, AugmentedUserProfile] = field(default_factory=dict)
    expansions: Dict[str, SequenceExpansion] = field(default_factory=dict)
    log: AugmentationLog = field(default_factory=AugmentationLog)

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_jsonl(directory / "items_aug.jsonl", (asdict(self.items[k]) for k in sorted(self.items)))
        write_jsonl(directory / "users_aug.jsonl",
                    ({"user": u, "profile": asdict(self.profiles[u]), "expansion": asdict(self.expansions[u])}
                     for u in sorted(self.profiles)))

    @classmethod
    def load(cls, directory: Path) -> "AugmentedDataset":
        directory = Path(directory)
        ds = cls()
        for d in read_jsonl(directory / "items_aug.jsonl"):
            it = AugmentedItem(**d)
            ds.items[(it.domain, it.item_id)] = it
        for d in read_jsonl(directory / "users_aug.jsonl"):
            ds.profiles[d["user"]] = AugmentedUserProfile(**d["profile"])
            ds.expansions[d["user"]] = SequenceExpansion(**d["expansion"])
        return ds

    def augmented_lengths(self, split: SplitDataset) -> Dict[str, float]:
        out = {}
        for dom in DOMAINS:
            lens = [len(merge_expansion([e.item for e in split.history(u, dom)],
                                        self.expansions.get(u, SequenceExpansion()).positives(dom)))
                    for u in split.users]
            out[dom] = float(np.mean(lens)) if lens else 0.0
        return out


def run_privaugnet(split: SplitDataset, client: ChatClient, n_candidates: int = DEFAULT_CANDIDATES,
                   seed: int = 0, threads: int = 1, temperature: Optional[float] = None,
                   top_p: Optional[float] = None) -> AugmentedDataset:
    """Augment every catalog item, then each user's profile and training sequences.

    Only the training part of each user's history is shown to the LLM;
    candidates exclude the user's complete history.
    """
    def tune(t: PromptTemplate) -> PromptTemplate:
        kw = {}
        if temperature is not None:
            kw["temperature"] = temperature
        if top_p is not None:
            kw["top_p"] = top_p
        return PromptTemplate(t.name, t.text, **{**{"temperature": t.temperature, "top_p": t.top_p,
                                                    "max_tokens": t.max_tokens}, **kw})

    item_t, user_t, seq_t = tune(ITEM_TEMPLATE), tune(USER_TEMPLATE), tune(SEQUENCE_TEMPLATE)
    out = AugmentedDataset()
    alog = out.log

    catalog_items = [(dom, item) for dom in DOMAINS for item in split.catalogs[dom]]

    def do_item(key):
        dom, item = key
        meta = split.item_meta.get((dom, item), {})
        rec = {"item": item, "domain": dom, "title": meta.get("title") or item, "category": meta.get("category")}
        try:
            return augment_item(rec, item_t, client, alog)
        except LLMTransportError as exc:
            alog.warn(f"item {item}: transport failure ({exc}); keeping un-augmented")
            alog.fallbacks += 1
            return AugmentedItem(item, dom)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for key, res in zip(catalog_items, pool.map(do_item, catalog_items)):
            out.items[key] = res

    def do_user(ui: int):
        user = split.users[ui]
        s = split.splits[user]
        mixed = build_mixed_sequence(s["A"].train, s["B"].train)
        mixed_items = [out.items[(e.domain, e.item)] for e in mixed.events]
        rng = np.random.default_rng([seed, ui, 7])
        try:
            profile = augment_user(user, mixed_items, user_t, client, alog)
            hist = {d: [e.item for e in split.history(user, d)] for d in DOMAINS}
            cand_a = sample_candidates(split.catalogs["A"], n_candidates, hist["A"], rng)
            cand_b = sample_candidates(split.catalogs["B"], n_candidates, hist["B"], rng)
            expansion = expand_sequence(profile, mixed_items, cand_a, cand_b, seq_t, client, alog, out.items)
        except LLMTransportError as exc:
            alog.warn(f"user {user}: transport failure ({exc}); keeping un-augmented")
            alog.fallbacks += 1
            return AugmentedUserProfile(user), SequenceExpansion()
        return profile, expansion

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for ui, (profile, expansion) in zip(range(len(split.users)), pool.map(do_user, range(len(split.users)))):
            out.profiles[split.users[ui]] = profile
            out.expansions[split.users[ui]] = expansion
    return out
