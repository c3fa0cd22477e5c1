"""Closed word-level vocabulary over the question/answer templates."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .corpus import ALL_FAKES, FAMILIES

PAD, BOS, EOS, IMG, PSEUDO = "<pad>", "<bos>", "<eos>", "<img>", "s*"
SPECIALS = (PAD, BOS, EOS, IMG, PSEUDO)

_QUESTION_WORDS = ["is", "this", "photo", "fake", ",", "and", "what", "its", "source",
                   "generator", "?"]
_ANSWER_WORDS = ["no", "it", "a", "real", "sample", ".", "yes", "generated", "by", "model"]

_TOKEN_RE = re.compile(r"s\*|[a-z0-9]+(?:-[a-z0-9]+)*|<[a-z]+>|\S")
_PUNCT = {",", ".", "?"}


class UnknownToken(KeyError):
    """A word outside the closed lexicon."""


def _lexicon() -> list[str]:
    words = list(SPECIALS)
    for w in _QUESTION_WORDS + _ANSWER_WORDS + list(FAMILIES):
        if w not in words:
            words.append(w)
    for g in ALL_FAKES:
        for w in g.display_name.split():
            if w not in words:
                words.append(w)
    return words


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    roles: tuple[str, ...]

    def __post_init__(self):
        if len(self.ids) != len(self.roles):
            raise ValueError("ids and roles differ in length")

    def __len__(self) -> int:
        return len(self.ids)

    def array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)


class Vocab:
    def __init__(self, words: list[str] | None = None):
        self.words = list(words) if words is not None else _lexicon()
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad = self.index[PAD]
        self.bos = self.index[BOS]
        self.eos = self.index[EOS]
        self.img = self.index[IMG]
        self.pseudo = self.index[PSEUDO]

    def __len__(self) -> int:
        return len(self.words)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()

    def tokenize(self, text: str, role: str = "prompt") -> TokenSequence:
        ids = []
        for tok in _TOKEN_RE.findall(text.lower()):
            if tok not in self.index:
                raise UnknownToken(tok)
            ids.append(self.index[tok])
        return TokenSequence(tuple(ids), (role,) * len(ids))

    def detokenize(self, ids) -> str:
        out = ""
        for i in ids:
            w = self.words[int(i)]
            if out and w not in _PUNCT:
                out += " "
            out += w
        return out

    def answer(self, text: str) -> TokenSequence:
        """Target answer: tokenized text followed by EOS."""
        seq = self.tokenize(text, role="answer")
        return TokenSequence(seq.ids + (self.eos,), seq.roles + ("answer",))


def normalize(text: str) -> str:
    """Canonical lowercase spacing used for round-trip comparisons."""
    toks = _TOKEN_RE.findall(text.lower())
    out = ""
    for t in toks:
        if out and t not in _PUNCT:
            out += " "
        out += t
    return out
