"""Rule-based keyword extraction from captions, keyword vocabulary and priors.

Part-of-speech tags and lemmas come from a lexicon file (UTF-8 TSV with
``surface``, ``pos``, ``lemma`` columns; ``#`` lines are comments). Words not
in the lexicon are treated as nouns whose lemma is the lowercased word with
one trailing ``s`` removed. Tokens without letters or digits are ``other``.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data_io import is_punctuation, tokenize

CONTENT_CLASSES = frozenset({"noun", "verb", "adjective", "adverb"})
POS_CLASSES = CONTENT_CLASSES | {"other"}
EXCLUDED_LEMMAS = frozenset({"be"})
PRIOR_FLOOR = 1e-6


class CorpusError(ValueError):
    pass


@dataclass
class TagLexicon:
    entries: dict[str, tuple[str, str]]  # surface -> (pos, lemma)

    def tag(self, word: str) -> tuple[str, str]:
        word = word.lower()
        hit = self.entries.get(word)
        if hit is not None:
            return hit
        if is_punctuation(word):
            return "other", word
        lemma = word[:-1] if len(word) > 1 and word.endswith("s") else word
        return "noun", lemma


def load_lexicon(path: str | os.PathLike) -> TagLexicon:
    entries = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated columns")
            surface, pos, lemma = parts
            if pos not in POS_CLASSES:
                raise ValueError(f"{path}:{lineno}: unknown part of speech {pos!r}")
            entries[surface.lower()] = (pos, lemma.lower())
    return TagLexicon(entries)


def default_lexicon() -> TagLexicon:
    with resources.as_file(resources.files("kwcap") / "data" / "lexicon.tsv") as path:
        return load_lexicon(path)


def content_lemmas(caption: str, lexicon: TagLexicon) -> list[str]:
    """Lemmas of noun/verb/adjective/adverb tokens, in caption order."""
    out = []
    for token in tokenize(caption):
        pos, lemma = lexicon.tag(token)
        if pos in CONTENT_CLASSES:
            out.append(lemma)
    return out


@dataclass
class KeywordVocabulary:
    lemmas: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.lemmas)) != len(self.lemmas):
            raise ValueError("duplicate lemmas in keyword vocabulary")
        self.index = {lemma: i for i, lemma in enumerate(self.lemmas)}

    def __len__(self) -> int:
        return len(self.lemmas)


def build_keyword_vocab(captions: Iterable[str], lexicon: TagLexicon, size: int) -> KeywordVocabulary:
    """The ``size`` most frequent content lemmas, minus "be"; ties lexicographic."""
    counts = Counter(
        lemma
        for text in captions
        for lemma in content_lemmas(text, lexicon)
        if lemma not in EXCLUDED_LEMMAS
    )
    if not counts and size > 0:
        raise CorpusError("corpus has no content lemmas")
    if len(counts) < size:
        raise CorpusError(
            f"only {len(counts)} distinct keyword lemmas, {size} requested "
            f"(short by {size - len(counts)})"
        )
    ranked = sorted(counts, key=lambda lemma: (-counts[lemma], lemma))
    return KeywordVocabulary(ranked[:size])


def extract_keywords(caption: str, vocab: KeywordVocabulary, lexicon: TagLexicon) -> list[int]:
    """Ground-truth keyword ids of one caption: unique, ascending."""
    return sorted({vocab.index[l] for l in content_lemmas(caption, lexicon) if l in vocab.index})


@dataclass
class KeywordPriors:
    p: np.ndarray
    lam: np.ndarray  # positive-class weights 1/p
    gam: np.ndarray  # negative-class weights 1/(1-p)

    @classmethod
    def from_probabilities(cls, p: Sequence[float]) -> "KeywordPriors":
        p = np.clip(np.asarray(p, dtype=np.float64), PRIOR_FLOOR, 1.0 - PRIOR_FLOOR)
        return cls(p, 1.0 / p, 1.0 / (1.0 - p))

    @classmethod
    def uniform(cls, size: int) -> "KeywordPriors":
        return cls.from_probabilities(np.full(size, 0.5))


def compute_priors(keyword_sets: Sequence[Iterable[int]], size: int) -> KeywordPriors:
    """Fraction of training captions containing each keyword, clamped away from 0 and 1."""
    if not keyword_sets:
        raise CorpusError("cannot compute keyword priors from an empty caption list")
    incidence = np.zeros(size)
    for ids in keyword_sets:
        for c in set(ids):
            incidence[c] += 1
    return KeywordPriors.from_probabilities(incidence / len(keyword_sets))


def save_keyword_file(path: str | os.PathLike, vocab: KeywordVocabulary, priors: KeywordPriors) -> None:
    doc = {"lemmas": vocab.lemmas, "prior": [float(x) for x in priors.p]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_keyword_file(path: str | os.PathLike) -> tuple[KeywordVocabulary, KeywordPriors]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return KeywordVocabulary(doc["lemmas"]), KeywordPriors.from_probabilities(doc["prior"])
