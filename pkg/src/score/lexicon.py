"""Lexicons and light text utilities backing the deterministic (mock) analysis paths.

The verb tables are the contract between the rule-based extractor and the
synthetic-corpus generator: generated event sentences use exactly these
word forms, which is what makes detection exact on generated corpora.
"""

from __future__ import annotations

import functools
import json
import re
from importlib import resources

from .story import ItemState

# Verbs that commit an item to a state when they share a sentence with it.
DESTROYED_WORDS = frozenset({"shattered", "destroyed", "burned", "incinerated", "smashed"})
LOST_WORDS = frozenset({"lost", "vanished", "disappeared", "missing", "misplaced"})

# Words that mark a reintroduction as narratively explained.
EXPLANATION_WORDS = frozenset({"repaired", "restored", "recovered", "rebuilt"})

SENTENCE_ENDERS = ".!?\n"

_WORD_RE = re.compile(r"[\w']+")


def tokens(text: str) -> list[str]:
    """Case-folded word tokens."""
    return [t.casefold() for t in _WORD_RE.findall(text)]


def state_for_tokens(toks: list[str]) -> ItemState:
    """State implied by a sentence's tokens; plain mentions read as active."""
    tokset = set(toks)
    if tokset & DESTROYED_WORDS:
        return ItemState.DESTROYED
    if tokset & LOST_WORDS:
        return ItemState.LOST
    return ItemState.ACTIVE


def has_explanation(toks: list[str]) -> bool:
    return bool(set(toks) & EXPLANATION_WORDS)


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of sentences, split after runs of . ! ? or newline.

    Spans are trimmed of surrounding whitespace and always index into the
    original text, so they double as evidence spans.
    """
    spans: list[tuple[int, int]] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] in SENTENCE_ENDERS:
            while i + 1 < n and text[i + 1] in SENTENCE_ENDERS:
                i += 1
            spans.append((start, i + 1))
            start = i + 1
        i += 1
    if start < n:
        spans.append((start, n))
    trimmed = []
    for s, e in spans:
        while s < e and text[s].isspace():
            s += 1
        while e > s and text[e - 1].isspace():
            e -= 1
        if s < e:
            trimmed.append((s, e))
    return trimmed


def sentences(text: str) -> list[str]:
    return [text[s:e] for s, e in sentence_spans(text)]


def alias_pattern(names: tuple[str, ...] | list[str]) -> re.Pattern:
    """Whole-word, case-insensitive matcher for any of an item's aliases."""
    alts = "|".join(re.escape(n) for n in sorted(names, key=len, reverse=True))
    return re.compile(rf"\b(?:{alts})\b", re.IGNORECASE)


# ---------------------------------------------------------------------------
# Sentiment
# ---------------------------------------------------------------------------


@functools.cache
def sentiment_lexicon() -> tuple[frozenset[str], frozenset[str]]:
    raw = json.loads(resources.files("score").joinpath("data/sentiment_lexicon.json").read_text("utf-8"))
    return frozenset(raw["positive"]), frozenset(raw["negative"])


def mock_sentiment_value(text: str) -> float:
    """Deterministic tone score in [0, 1]; 0.5 for lexicon-free text.

    (pos - neg) / (pos + neg + 1), mapped affinely onto [0, 1]; monotone in
    lexicon hits and never saturating to the endpoints.
    """
    positive, negative = sentiment_lexicon()
    toks = tokens(text)
    pos = sum(1 for t in toks if t in positive)
    neg = sum(1 for t in toks if t in negative)
    raw = (pos - neg) / (pos + neg + 1)
    return 0.5 + raw / 2
