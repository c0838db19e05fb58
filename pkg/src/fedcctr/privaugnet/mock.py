"""Offline stand-in for the chat endpoint.

Replies are a pure function of ``(request, seed)``: the task marker and JSON
inputs are parsed out of the prompt and a structured answer is drawn from the
closed vocabularies with a hash-seeded generator.  Sequence expansion ranks
candidates by genre overlap with the history, standing in for an LLM's
judgement of fit.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from typing import List

import numpy as np

from .llm import ChatReply, ChatRequest, _approx_tokens
from .prompts import AGE_BRACKETS, GENDERS, GENRES, KEYWORDS, THEMES

_TASK = re.compile(r"TASK:\s*(\w+)")


def _field(prompt: str, label: str) -> str:
    m = re.search(rf"^{label}:\s*(.*)$", prompt, flags=re.MULTILINE)
    return m.group(1) if m else "null"


def _rank_by_hash(ids: List[str], key: str) -> List[str]:
    return sorted(ids, key=lambda i: hashlib.sha256(f"{key}|{i}".encode()).hexdigest())


class MockChatClient:
    def __init__(self, seed: int = 0) -> None:
        self.seed = seed
        self.calls = 0

    def chat(self, request: ChatRequest) -> ChatReply:
        self.calls += 1
        key = request.digest(f"mock-{self.seed}")
        rng = np.random.default_rng(int(key[:16], 16))
        prompt = request.messages[-1][1]
        m = _TASK.search(prompt)
        task = m.group(1) if m else ""
        if task == "item_augmentation":
            reply = self._item(prompt, rng)
        elif task == "user_profile":
            reply = self._user(prompt, rng)
        elif task == "sequence_expansion":
            reply = self._sequence(prompt, key)
        else:
            reply = {"error": "unknown task"}
        text = json.dumps(reply, sort_keys=True)
        return ChatReply(text, _approx_tokens(prompt), _approx_tokens(text), 0.0)

    @staticmethod
    def _pick(rng: np.random.Generator, vocab, k: int) -> List[str]:
        return [vocab[i] for i in sorted(rng.choice(len(vocab), size=k, replace=False))]

    def _item(self, prompt: str, rng: np.random.Generator) -> dict:
        item = json.loads(_field(prompt, "INPUT"))
        category = item.get("category")
        if category not in GENRES:
            category = GENRES[int(rng.integers(len(GENRES)))]
        genres = sorted({category, *self._pick(rng, GENRES, int(rng.integers(0, 2)))})
        # themes follow the category so that related items share descriptive tags
        cat_rng = np.random.default_rng(GENRES.index(category) + 1000 * self.seed)
        themes = self._pick(cat_rng, THEMES, 2)
        return {"genres": genres, "themes": themes, "keywords": self._pick(rng, KEYWORDS, 2),
                "category": category}

    def _user(self, prompt: str, rng: np.random.Generator) -> dict:
        history = json.loads(_field(prompt, "INPUT"))
        counts = Counter(g for ev in history for g in (ev.get("genres") or []))
        prefs = [g for g, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:3]]
        return {"age_bracket": AGE_BRACKETS[int(rng.integers(len(AGE_BRACKETS)))],
                "gender": GENDERS[int(rng.integers(len(GENDERS)))],
                "preference_summary": prefs}

    def _sequence(self, prompt: str, key: str) -> dict:
        history = json.loads(_field(prompt, "HISTORY"))
        taste = Counter(g for ev in history for g in (ev.get("genres") or []))
        out = {}
        for dom in ("A", "B"):
            raw = json.loads(_field(prompt, f"CANDIDATES_{dom}"))
            genres = {str(c["item"]): c.get("genres") or [] for c in raw if isinstance(c, dict)}
            cands = [str(c["item"]) if isinstance(c, dict) else str(c) for c in raw]
            # candidates sharing the history's genres come first; hash order breaks ties
            affinity = {c: sum(taste[g] for g in genres.get(c, [])) for c in cands}
            order = {c: i for i, c in enumerate(_rank_by_hash(cands, key))}
            ranked = sorted(cands, key=lambda c: (-affinity[c], order[c]))
            k = math.ceil(len(ranked) / 3)
            out[f"positives_{dom}"] = ranked[:k]
            out[f"negatives_{dom}"] = ranked[k:]
        return out
