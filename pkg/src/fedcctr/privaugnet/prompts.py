"""Prompt templates and the closed vocabularies augmented fields are drawn from."""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Dict, Tuple

from .llm import DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE, DEFAULT_TOP_P, ChatRequest

GENRES = (
    "mystery", "romance", "science", "history", "fantasy", "biography", "comedy", "drama",
    "adventure", "horror", "documentary", "family", "thriller", "poetry", "travel", "cooking",
)
THEMES = (
    "friendship", "identity", "survival", "love", "power", "justice", "discovery", "loss",
    "ambition", "freedom", "home", "nature", "technology", "tradition", "rivalry", "healing",
)
KEYWORDS = (
    "classic", "bestseller", "award", "series", "illustrated", "beginner", "advanced", "seasonal",
    "organic", "durable", "compact", "premium", "budget", "gift", "vintage", "modern",
    "quick", "long", "bold", "gentle",
)
CATEGORIES = GENRES
AGE_BRACKETS = ("under 18", "18-24", "25-34", "35-44", "45-54", "55+")
GENDERS = ("female", "male", "unspecified")

ITEM_FIELDS = ("genres", "themes", "keywords", "category")
USER_FIELDS = ("age_bracket", "gender", "preference_summary")

SYSTEM_PROMPT = "You are a data augmentation assistant for a recommender system. Reply with strict JSON only."


class TemplateError(KeyError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    text: str
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    max_tokens: int = DEFAULT_MAX_TOKENS

    @property
    def placeholders(self) -> Tuple[str, ...]:
        return tuple(f for _, f, _, _ in string.Formatter().parse(self.text) if f)

    def render(self, **values: str) -> str:
        missing = [p for p in self.placeholders if p not in values]
        if missing:
            raise TemplateError(f"template {self.name!r} has unbound placeholders: {missing}")
        return self.text.format(**values)

    def request(self, attempt: int = 0, **values: str) -> ChatRequest:
        return ChatRequest(
            messages=(("system", SYSTEM_PROMPT), ("user", self.render(**values))),
            temperature=self.temperature, top_p=self.top_p, max_tokens=self.max_tokens, attempt=attempt,
        )


ITEM_TEMPLATE = PromptTemplate(
    "item",
    "TASK: item_augmentation\n"
    "Describe the following {domain_name} item. Choose genres and category from: {genres}. "
    "Choose themes from: {themes}. Choose keywords from: {keywords}.\n"
    "Answer as JSON with keys \"genres\", \"themes\", \"keywords\" (lists of 1-3 strings) "
    "and \"category\" (one string).\n"
    "INPUT: {item_json}",
)

USER_TEMPLATE = PromptTemplate(
    "user",
    "TASK: user_profile\n"
    "Given this user's chronological cross-domain history with item descriptions, infer the profile. "
    "Choose age_bracket from: {ages}. Choose gender from: {genders}. "
    "Choose up to 3 preference tags from: {genres}.\n"
    "Answer as JSON with keys \"age_bracket\", \"gender\", \"preference_summary\".\n"
    "INPUT: {history_json}",
)

SEQUENCE_TEMPLATE = PromptTemplate(
    "sequence",
    "TASK: sequence_expansion\n"
    "Given the user profile and history, pick from each candidate list the items the user would likely "
    "click (positives) and the ones they would not (negatives). Use only candidate ids.\n"
    "Answer as JSON with keys \"positives_A\", \"negatives_A\", \"positives_B\", \"negatives_B\".\n"
    "PROFILE: {profile_json}\nHISTORY: {history_json}\nCANDIDATES_A: {candidates_a}\nCANDIDATES_B: {candidates_b}",
)


def item_template_values() -> Dict[str, str]:
    return {"genres": ", ".join(GENRES), "themes": ", ".join(THEMES), "keywords": ", ".join(KEYWORDS)}


def user_template_values() -> Dict[str, str]:
    return {"ages": ", ".join(AGE_BRACKETS), "genders": ", ".join(GENDERS), "genres": ", ".join(GENRES)}
