"""Per-episode structured summaries and the retrieval documents built from them.

A summary digests one episode into plot points, character actions, key-item
interactions, relationship notes, emotional shifts, and a sentiment score.
The retrieval document flattens that digest into a deterministic text layout
(synopsis, then ACTIONS:, then ITEMS:) that embeds well and parses back.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from . import lexicon, prompts
from .errors import SummaryError, ValidationError
from .gateway import SentimentScore, extract_json_value
from .story import CharacterAction, Episode, ItemInteraction, ItemState, KeyItem

logger = logging.getLogger(__name__)

# Sentence-initial words that never name a character.
_NOT_NAMES = frozenset(
    {
        "The", "A", "An", "It", "But", "Then", "However", "When", "While",
        "After", "Before", "That", "This", "There", "In", "On", "At", "By",
        "No", "Yes", "And", "As", "His", "Her", "Their", "Its", "Flames",
        "Travelers", "Smoke", "Artisans", "Craftsmen", "Night", "Morning",
    }
)

_NO_VALUE = "-"


@dataclass(frozen=True)
class EpisodeSummary:
    story_id: str
    episode_index: int
    synopsis: str
    plot_points: tuple[str, ...]
    actions: tuple[CharacterAction, ...]
    interactions: tuple[ItemInteraction, ...]
    relationships: tuple[str, ...]
    emotional_changes: tuple[str, ...]
    sentiment: SentimentScore

    def __post_init__(self):
        if not self.synopsis.strip():
            raise ValidationError("synopsis", "must be non-empty")


@dataclass(frozen=True)
class RetrievalDocument:
    doc_id: str
    story_id: str
    episode_index: int
    text: str
    kind: str = "summary"

    def __post_init__(self):
        if not self.text:
            raise ValidationError("text", "must be non-empty")


def summarize_episode(
    episode: Episode, items: list[KeyItem], gateway, *, story_id: str, prompts_root=None
) -> EpisodeSummary:
    """Produce a structured summary; deterministic rules under the mock backend."""
    if gateway.is_mock:
        return rule_summarize(episode, items, gateway, story_id=story_id)
    return _llm_summarize(episode, items, gateway, story_id=story_id, prompts_root=prompts_root)


def rule_summarize(episode: Episode, items: list[KeyItem], gateway, *, story_id: str) -> EpisodeSummary:
    spans = lexicon.sentence_spans(episode.text)
    sents = [episode.text[s:e] for s, e in spans]
    positive, negative = lexicon.sentiment_lexicon()
    state_words = lexicon.DESTROYED_WORDS | lexicon.LOST_WORDS | lexicon.EXPLANATION_WORDS

    synopsis = " ".join(sents[:2]) if sents else episode.text.strip()

    actions: list[CharacterAction] = []
    actor_by_sentence: dict[int, str] = {}
    plot_points: list[str] = []
    interactions: list[ItemInteraction] = []
    relationships: list[str] = []
    emotional_changes: list[str] = []

    patterns = [(item, lexicon.alias_pattern(item.names)) for item in items]

    for i, sentence in enumerate(sents):
        words = sentence.split()
        name = _leading_name(words)
        if name is not None:
            actions.append(
                CharacterAction(character=name, episode_index=episode.index, description=sentence)
            )
            actor_by_sentence[i] = name

        toks = lexicon.tokens(sentence)
        tokset = set(toks)
        if tokset & state_words:
            plot_points.append(sentence)
        if tokset & (positive | negative):
            emotional_changes.append(sentence)
        if _names_in_sentence(words) >= 2:
            relationships.append(sentence)

        for item, pattern in patterns:
            if not pattern.search(sentence):
                continue
            state = lexicon.state_for_tokens(toks)
            interactions.append(
                ItemInteraction(
                    item_id=item.item_id,
                    episode_index=episode.index,
                    description=sentence,
                    actor=actor_by_sentence.get(i),
                    implied_state=state if (tokset & state_words) else None,
                )
            )

    return EpisodeSummary(
        story_id=story_id,
        episode_index=episode.index,
        synopsis=synopsis,
        plot_points=tuple(plot_points[:5]),
        actions=tuple(actions),
        interactions=tuple(interactions),
        relationships=tuple(relationships),
        emotional_changes=tuple(emotional_changes),
        sentiment=gateway.score_sentiment(episode.text),
    )


def _leading_name(words: list[str]) -> str | None:
    if len(words) < 2:
        return None
    first = words[0].strip(",.;:!?\"'")
    second = words[1].strip(",.;:!?\"'")
    if first.istitle() and first not in _NOT_NAMES and second and second[0].islower():
        return first
    return None


def _names_in_sentence(words: list[str]) -> int:
    names = set()
    for word in words[1:]:  # position 0 is ambiguous with sentence case
        cleaned = word.strip(",.;:!?\"'")
        if cleaned.istitle() and cleaned not in _NOT_NAMES:
            names.add(cleaned)
    # the leading word still counts when it parses as a name
    lead = _leading_name(words)
    if lead:
        names.add(lead)
    return len(names)


def _llm_summarize(episode, items, gateway, *, story_id, prompts_root=None) -> EpisodeSummary:
    prompt = prompts.render(
        prompts.load("summarize", prompts_root),
        episode_text=episode.text,
        items_json=json.dumps(
            [{"item_id": k.item_id, "names": list(k.names)} for k in items], ensure_ascii=False
        ),
    )
    reply = gateway.complete(prompt)
    try:
        return _parse_summary_reply(reply, episode, items, gateway, story_id)
    except (ValueError, ValidationError):
        repair = prompts.render(prompts.load("repair", prompts_root), raw_reply=reply, original_prompt=prompt)
        reply2 = gateway.complete(repair)
        try:
            return _parse_summary_reply(reply2, episode, items, gateway, story_id)
        except (ValueError, ValidationError) as e:
            raise SummaryError(f"unusable summary reply: {e}", raw_reply=reply2) from e


def _parse_summary_reply(reply, episode, items, gateway, story_id) -> EpisodeSummary:
    raw = extract_json_value(reply)
    if not isinstance(raw, dict):
        raise ValueError("expected a JSON object")
    synopsis = raw.get("synopsis")
    if not isinstance(synopsis, str) or not synopsis.strip():
        raise ValueError("missing or empty synopsis")

    known = {k.item_id for k in items}
    interactions = []
    for entry in raw.get("interactions", []):
        item_id = entry.get("item_id")
        if item_id not in known:
            logger.warning("summary names undeclared item %r; dropped", item_id)
            continue
        implied = entry.get("implied_state")
        interactions.append(
            ItemInteraction(
                item_id=item_id,
                episode_index=episode.index,
                description=_one_line(str(entry.get("description", ""))) or "(unspecified)",
                actor=entry.get("actor") or None,
                implied_state=ItemState(implied) if implied else None,
            )
        )
    actions = [
        CharacterAction(
            character=str(entry.get("character", "")) or "(unknown)",
            episode_index=episode.index,
            description=_one_line(str(entry.get("description", ""))) or "(unspecified)",
        )
        for entry in raw.get("actions", [])
    ]
    return EpisodeSummary(
        story_id=story_id,
        episode_index=episode.index,
        synopsis=_one_line(synopsis),
        plot_points=tuple(str(p) for p in raw.get("plot_points", [])),
        actions=tuple(actions),
        interactions=tuple(interactions),
        relationships=tuple(str(r) for r in raw.get("relationships", [])),
        emotional_changes=tuple(str(c) for c in raw.get("emotional_changes", [])),
        sentiment=gateway.score_sentiment(episode.text),
    )


def _one_line(text: str) -> str:
    return " ".join(text.split())


# ---------------------------------------------------------------------------
# Retrieval documents
# ---------------------------------------------------------------------------


def build_retrieval_document(summary: EpisodeSummary) -> RetrievalDocument:
    """Flatten a summary into the deterministic retrieval-document layout.

    Order is preserved exactly as given; two summaries differing only in
    ordering produce different documents.
    """
    lines = [summary.synopsis, "ACTIONS:"]
    for action in summary.actions:
        lines.append(f"- {action.character} | {_one_line(action.description)}")
    lines.append("ITEMS:")
    for inter in summary.interactions:
        state = inter.implied_state.value if inter.implied_state else _NO_VALUE
        actor = inter.actor if inter.actor else _NO_VALUE
        lines.append(f"- {inter.item_id} | actor={actor} | state={state} | {_one_line(inter.description)}")
    return RetrievalDocument(
        doc_id=f"{summary.story_id}#{summary.episode_index}",
        story_id=summary.story_id,
        episode_index=summary.episode_index,
        text="\n".join(lines),
    )


def parse_items_section(text: str, episode_index: int) -> list[ItemInteraction]:
    """Recover the interactions list from a document's ITEMS: section."""
    interactions = []
    in_items = False
    for line in text.splitlines():
        if line == "ITEMS:":
            in_items = True
            continue
        if not in_items:
            continue
        if not line.startswith("- "):
            break
        item_id, actor_part, state_part, description = line[2:].split(" | ", 3)
        actor = actor_part.removeprefix("actor=")
        state = state_part.removeprefix("state=")
        interactions.append(
            ItemInteraction(
                item_id=item_id,
                episode_index=episode_index,
                description=description,
                actor=None if actor == _NO_VALUE else actor,
                implied_state=None if state == _NO_VALUE else ItemState(state),
            )
        )
    return interactions


# ---------------------------------------------------------------------------
# Summary file persistence
# ---------------------------------------------------------------------------


def summary_to_dict(summary: EpisodeSummary) -> dict:
    return {
        "story_id": summary.story_id,
        "episode_index": summary.episode_index,
        "synopsis": summary.synopsis,
        "plot_points": list(summary.plot_points),
        "actions": [
            {"character": a.character, "episode_index": a.episode_index, "description": a.description}
            for a in summary.actions
        ],
        "interactions": [
            {
                "item_id": i.item_id,
                "episode_index": i.episode_index,
                "actor": i.actor,
                "description": i.description,
                "implied_state": i.implied_state.value if i.implied_state else None,
            }
            for i in summary.interactions
        ],
        "relationships": list(summary.relationships),
        "emotional_changes": list(summary.emotional_changes),
        "sentiment": summary.sentiment.value,
    }


def summary_from_dict(raw: dict) -> EpisodeSummary:
    return EpisodeSummary(
        story_id=raw["story_id"],
        episode_index=raw["episode_index"],
        synopsis=raw["synopsis"],
        plot_points=tuple(raw["plot_points"]),
        actions=tuple(
            CharacterAction(
                character=a["character"],
                episode_index=a["episode_index"],
                description=a["description"],
            )
            for a in raw["actions"]
        ),
        interactions=tuple(
            ItemInteraction(
                item_id=i["item_id"],
                episode_index=i["episode_index"],
                actor=i.get("actor"),
                description=i["description"],
                implied_state=ItemState(i["implied_state"]) if i.get("implied_state") else None,
            )
            for i in raw["interactions"]
        ),
        relationships=tuple(raw["relationships"]),
        emotional_changes=tuple(raw["emotional_changes"]),
        sentiment=SentimentScore(value=raw["sentiment"]),
    )


def summaries_to_dict(story_id: str, summaries: list[EpisodeSummary]) -> dict:
    return {"story_id": story_id, "summaries": [summary_to_dict(s) for s in summaries]}


def summaries_from_dict(raw: dict) -> tuple[str, list[EpisodeSummary]]:
    return raw["story_id"], [summary_from_dict(s) for s in raw["summaries"]]
