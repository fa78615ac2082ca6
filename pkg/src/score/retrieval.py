"""Similarity retrieval with the sentiment-consistency filter.

Candidates come back from the index by cosine similarity; candidates whose
sentiment differs from the focus by more than the tolerance are dropped and
the best N survivors form the context. The candidate pool starts at M and
widens until enough survivors are found (or the index is exhausted), so the
selection is always exactly equal to filter-everything-then-take-N. If the
filter empties the pool entirely, retrieval falls back to pure similarity
and flags the bundle.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

from .errors import ContractError, ValidationError
from .gateway import SentimentScore
from .index import FlatIndex, IndexEntry

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalConfig:
    top_n: int = 5
    sentiment_tolerance: float = 0.3
    candidate_pool: int = 0  # 0 -> 4 * top_n
    exclude_self: bool = True
    context_char_budget: int = 12_000
    sentiment_filter_enabled: bool = True
    filter_queries: bool = True  # apply the sentiment filter during QA too

    def __post_init__(self):
        if self.top_n <= 0:
            raise ValidationError("top_n", "must be positive")
        if not (0.0 <= self.sentiment_tolerance <= 1.0):
            raise ValidationError("sentiment_tolerance", "must be in [0, 1]")
        if self.candidate_pool and self.candidate_pool < self.top_n:
            raise ValidationError("candidate_pool", "must be >= top_n")
        if self.context_char_budget <= 0:
            raise ValidationError("context_char_budget", "must be positive")

    @property
    def pool(self) -> int:
        return self.candidate_pool or 4 * self.top_n

    def to_dict(self) -> dict:
        return {
            "top_n": self.top_n,
            "sentiment_tolerance": self.sentiment_tolerance,
            "candidate_pool": self.candidate_pool,
            "exclude_self": self.exclude_self,
            "context_char_budget": self.context_char_budget,
            "sentiment_filter_enabled": self.sentiment_filter_enabled,
            "filter_queries": self.filter_queries,
        }


@dataclass(frozen=True)
class SummaryRecord:
    """What retrieval needs to know about one indexed unit."""

    entry_id: str
    story_id: str
    episode_index: int
    sentiment: float
    text: str


@dataclass(frozen=True)
class ContextEntry:
    story_id: str
    episode_index: int
    score: float
    sentiment: float
    text: str

    def header(self) -> str:
        return f"[{self.story_id}#{self.episode_index}] (similarity={self.score:.4f}, sentiment={self.sentiment:.3f})"

    def render(self) -> str:
        return f"{self.header()}\n{self.text}\n"


@dataclass(frozen=True)
class ContextBundle:
    focus: str
    selected: tuple[ContextEntry, ...]
    truncated: bool = False
    sentiment_filter_bypassed: bool = False

    def render(self) -> str:
        return "\n".join(entry.render() for entry in self.selected)

    def digest(self) -> str:
        payload = self.focus + "\x00" + self.render()
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def episode_refs(self) -> list[tuple[str, int]]:
        return [(e.story_id, e.episode_index) for e in self.selected]

    def __len__(self) -> int:
        return len(self.selected)


def retrieve_related(
    focus_text: str,
    focus_sentiment: SentimentScore,
    index: FlatIndex,
    records: dict[str, SummaryRecord],
    config: RetrievalConfig,
    gateway,
    *,
    exclude_ref: tuple[str, int] | None = None,
    restrict_story: str | None = None,
    focus_label: str = "",
    apply_filter: bool | None = None,
) -> ContextBundle:
    """Build the context bundle for one focus text.

    exclude_ref drops the focus episode itself from candidacy (self-retrieval
    says nothing useful about an episode under evaluation); restrict_story
    limits candidacy to one story.
    """
    if not index.frozen:
        raise ContractError("index must be frozen before retrieval")
    if len(index) == 0:
        raise ContractError("index empty")
    if not focus_text:
        raise ContractError("focus_text must be non-empty")

    filtering = config.sentiment_filter_enabled if apply_filter is None else apply_filter
    query = gateway.embed([focus_text])[0]

    excluded = exclude_ref if config.exclude_self else None
    entry_filter = None
    if excluded is not None or restrict_story is not None:

        def entry_filter(entry: IndexEntry) -> bool:
            if restrict_story is not None and entry.story_id != restrict_story:
                return False
            return (entry.story_id, entry.episode_index) != excluded

    # widen the pool until enough survivors exist or everything was scanned,
    # keeping the result identical to filter-all-then-top-N
    pool = max(config.pool, config.top_n)
    while True:
        hits = index.search_top_n(query, n=pool, filter=entry_filter)
        if filtering:
            survivors = [
                h for h in hits
                if abs(focus_sentiment.value - _record(records, h.entry_id).sentiment)
                <= config.sentiment_tolerance
            ]
        else:
            survivors = list(hits)
        if len(survivors) >= config.top_n or len(hits) < pool:
            break
        pool *= 2

    bypassed = False
    if filtering and not survivors and hits:
        logger.info("sentiment filter removed every candidate; falling back to similarity only")
        survivors = list(hits)
        bypassed = True
    if len(survivors) < config.top_n:
        logger.debug("only %d survivors for top_n=%d", len(survivors), config.top_n)

    chosen = survivors[: config.top_n]
    entries = []
    used = 0
    truncated = False
    for hit in chosen:
        record = _record(records, hit.entry_id)
        entry = ContextEntry(
            story_id=record.story_id,
            episode_index=record.episode_index,
            score=hit.score,
            sentiment=record.sentiment,
            text=record.text,
        )
        cost = len(entry.render()) + (1 if entries else 0)  # rendered block + joiner
        if used + cost > config.context_char_budget:
            truncated = True
            break
        entries.append(entry)
        used += cost

    return ContextBundle(
        focus=focus_label or focus_text[:80],
        selected=tuple(entries),
        truncated=truncated,
        sentiment_filter_bypassed=bypassed,
    )


def retrieve_for_query(
    question: str,
    index: FlatIndex,
    records: dict[str, SummaryRecord],
    config: RetrievalConfig,
    gateway,
    *,
    restrict_story: str | None = None,
) -> ContextBundle:
    """Retrieval for question answering; the question's own tone is the focus sentiment."""
    if not question or not question.strip():
        raise ContractError("question must be non-empty")
    sentiment = gateway.score_sentiment(question)
    apply_filter = config.sentiment_filter_enabled and config.filter_queries
    return retrieve_related(
        question,
        sentiment,
        index,
        records,
        config,
        gateway,
        restrict_story=restrict_story,
        focus_label=f"query:{question[:72]}",
        apply_filter=apply_filter,
    )


def _record(records: dict[str, SummaryRecord], entry_id: str) -> SummaryRecord:
    try:
        return records[entry_id]
    except KeyError:
        raise ContractError(f"index entry {entry_id!r} has no summary record") from None


def records_to_dict(records: dict[str, SummaryRecord]) -> dict:
    return {
        entry_id: {
            "story_id": r.story_id,
            "episode_index": r.episode_index,
            "sentiment": r.sentiment,
            "text": r.text,
        }
        for entry_id, r in records.items()
    }


def records_from_dict(raw: dict) -> dict[str, SummaryRecord]:
    return {
        entry_id: SummaryRecord(
            entry_id=entry_id,
            story_id=v["story_id"],
            episode_index=v["episode_index"],
            sentiment=v["sentiment"],
            text=v["text"],
        )
        for entry_id, v in raw.items()
    }
