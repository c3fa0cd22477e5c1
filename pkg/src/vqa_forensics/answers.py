"""Question/answer grammar: render ground truth to text, parse model text back."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .corpus import ALL_FAKES, GeneratorId

QUESTION = "Is this photo fake, and what is its source generator?"
PSEUDO_QUESTION = "Is this photo fake, and what is its source generator S*?"
# asks for the specific model; same token layout as the pseudo-word question
MODEL_QUESTION = "Is this photo fake, and what is its source generator model?"
REAL_ANSWER = "No, it is a real sample."
FAKE_TEMPLATE = "Yes, it is a fake sample generated by {name}, a {category} model."

_BOUND_L = r"(?<![a-z0-9\-])"
_BOUND_R = r"(?![a-z0-9\-])"
_BY_NAME = {g.display_name: g for g in ALL_FAKES}
# longest names first so the alternation is leftmost-longest
_NAME_RE = re.compile(
    _BOUND_L + "(" + "|".join(re.escape(n) for n in sorted(_BY_NAME, key=len, reverse=True))
    + ")" + _BOUND_R)
_CATEGORY_RE = re.compile(_BOUND_L + "(gan|diffusion)" + _BOUND_R)
_VERDICT_RE = re.compile(_BOUND_L + "(fake|real)" + _BOUND_R)
_WORD_RE = re.compile(r"[a-z0-9*]+(?:-[a-z0-9]+)*")


def build_question(with_pseudo: bool) -> str:
    return PSEUDO_QUESTION if with_pseudo else QUESTION


def render_label(gen: GeneratorId) -> str:
    if gen is GeneratorId.REAL:
        return REAL_ANSWER
    return FAKE_TEMPLATE.format(name=gen.display_name, category=gen.family)


def render_family_label(gen: GeneratorId) -> str:
    """Partial-task target: the generator name is replaced by its family word."""
    if gen is GeneratorId.REAL:
        return REAL_ANSWER
    return FAKE_TEMPLATE.format(name=gen.family, category=gen.family)


@dataclass(frozen=True)
class ParsedAnswer:
    """Structured reading of a free-text answer.

    ``is_fake`` is None when no verdict could be extracted (UNPARSEABLE).
    """

    is_fake: bool | None
    model_name: GeneratorId | None = None
    model_category: str | None = None
    family_mismatch: bool = False

    @property
    def unparseable(self) -> bool:
        return self.is_fake is None

    def to_json(self) -> dict:
        return {
            "is_fake": "UNPARSEABLE" if self.is_fake is None else self.is_fake,
            "model_name": self.model_name.value if self.model_name else None,
            "model_category": self.model_category,
            "family_mismatch": self.family_mismatch,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ParsedAnswer":
        verdict = d["is_fake"]
        return cls(
            None if verdict == "UNPARSEABLE" else bool(verdict),
            GeneratorId(d["model_name"]) if d.get("model_name") else None,
            d.get("model_category"),
            bool(d.get("family_mismatch", False)),
        )

    @classmethod
    def truth(cls, gen: GeneratorId) -> "ParsedAnswer":
        if gen is GeneratorId.REAL:
            return cls(False)
        return cls(True, gen, gen.family)


UNPARSEABLE = ParsedAnswer(None)


def parse_answer(text: str) -> ParsedAnswer:
    t = text.lower()
    words = _WORD_RE.findall(t)
    is_fake: bool | None = None
    if words and words[0] in ("yes", "no"):
        is_fake = words[0] == "yes"
    else:
        m = _VERDICT_RE.search(t)
        if m:
            is_fake = m.group(1) == "fake"

    name_m = _NAME_RE.search(t)
    name = _BY_NAME[name_m.group(1)] if name_m else None
    category = None
    for m in _CATEGORY_RE.finditer(t):
        if name_m and name_m.start() <= m.start() < name_m.end():
            continue
        category = m.group(1)
        break

    if is_fake is False:
        return ParsedAnswer(False)
    mismatch = bool(name and category and name.family != category)
    return ParsedAnswer(is_fake, name, category, mismatch)
