"""Story data model and its canonical JSON persistence format.

A story is an ordered list of episodes plus the key items whose states get
tracked across them. Everything here is an immutable value object; the JSON
round trip is lossless and byte-stable.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass

from .errors import StoryParseError, ValidationError
from .jsonio import canonical_bytes

GENRES = ("science_fiction", "drama", "fantasy", "comedy", "other")


class ItemState(str, enum.Enum):
    """State of a key item at a given episode."""

    ACTIVE = "active"
    LOST = "lost"
    DESTROYED = "destroyed"


TERMINAL_STATES = frozenset({ItemState.LOST, ItemState.DESTROYED})


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: whitespace word count scaled by 4/3."""
    words = len(text.split())
    return math.ceil(words * 4 / 3)


@dataclass(frozen=True)
class Episode:
    """One narrative unit; `index` is the time coordinate of all tracking."""

    index: int
    text: str

    def __post_init__(self):
        if self.index < 0:
            raise ValidationError("index", f"must be >= 0, got {self.index}")
        if not self.text.strip():
            raise ValidationError("text", "must be non-empty after trimming")

    @property
    def token_estimate(self) -> int:
        return estimate_tokens(self.text)


@dataclass(frozen=True)
class KeyItem:
    """A tracked object; `names` are its surface aliases in the text."""

    item_id: str
    names: tuple[str, ...]

    def __post_init__(self):
        if not self.item_id:
            raise ValidationError("item_id", "must be non-empty")
        if not self.names:
            raise ValidationError("names", "must contain at least one alias")
        folded = [n.casefold() for n in self.names]
        if len(set(folded)) != len(folded):
            raise ValidationError("names", "duplicate alias after case-folding")


@dataclass(frozen=True)
class CharacterAction:
    """One character action observed in an episode."""

    character: str
    episode_index: int
    description: str

    def __post_init__(self):
        if not self.description.strip():
            raise ValidationError("description", "must be non-empty")


@dataclass(frozen=True)
class ItemInteraction:
    """One interaction with a key item; `implied_state` when the text commits to one."""

    item_id: str
    episode_index: int
    description: str
    actor: str | None = None
    implied_state: ItemState | None = None

    def __post_init__(self):
        if not self.item_id:
            raise ValidationError("item_id", "must be non-empty")


@dataclass(frozen=True)
class Story:
    story_id: str
    title: str
    genre: str
    key_items: tuple[KeyItem, ...] = ()
    episodes: tuple[Episode, ...] = ()

    def __post_init__(self):
        if not self.story_id:
            raise ValidationError("story_id", "must be non-empty")
        if self.genre not in GENRES:
            raise ValidationError("genre", f"must be one of {GENRES}, got {self.genre!r}")
        if not self.episodes:
            raise ValidationError("episodes", "must be non-empty")
        for pos, ep in enumerate(self.episodes):
            if ep.index != pos:
                raise ValidationError(
                    f"episodes[{pos}].index",
                    f"non-contiguous episode index (expected {pos}, got {ep.index})",
                )
        ids = [k.item_id for k in self.key_items]
        if len(set(ids)) != len(ids):
            raise ValidationError("key_items", "duplicate item_id")

    def item(self, item_id: str) -> KeyItem:
        for k in self.key_items:
            if k.item_id == item_id:
                return k
        raise KeyError(item_id)


# ---------------------------------------------------------------------------
# JSON persistence
# ---------------------------------------------------------------------------


def _expect(obj: dict, key: str, kind: type, path: str):
    if key not in obj:
        raise ValidationError(f"{path}.{key}", "missing required field")
    value = obj[key]
    # bool is an int subclass; never accept it where an int is expected
    if kind is int and isinstance(value, bool):
        raise ValidationError(f"{path}.{key}", f"expected {kind.__name__}, got bool")
    if not isinstance(value, kind):
        raise ValidationError(f"{path}.{key}", f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def parse_story(data: bytes) -> Story:
    """Parse and validate a story document.

    Raises StoryParseError (with byte offset) for malformed JSON and
    ValidationError (naming the field) for schema violations.
    """
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise StoryParseError(f"not valid UTF-8: {e.reason}", byte_offset=e.start) from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise StoryParseError(f"malformed JSON: {e.msg}", byte_offset=offset) from e
    if not isinstance(raw, dict):
        raise ValidationError("$", f"expected object, got {type(raw).__name__}")
    return story_from_dict(raw)


def story_from_dict(raw: dict) -> Story:
    story_id = _expect(raw, "story_id", str, "$")
    title = _expect(raw, "title", str, "$")
    genre = _expect(raw, "genre", str, "$")

    key_items = []
    for i, entry in enumerate(raw.get("key_items", [])):
        path = f"key_items[{i}]"
        if not isinstance(entry, dict):
            raise ValidationError(path, "expected object")
        names = _expect(entry, "names", list, path)
        for j, name in enumerate(names):
            if not isinstance(name, str):
                raise ValidationError(f"{path}.names[{j}]", "expected str")
        try:
            key_items.append(KeyItem(item_id=_expect(entry, "item_id", str, path), names=tuple(names)))
        except ValidationError as e:
            raise ValidationError(f"{path}.{e.field}", e.reason) from e

    episodes_raw = _expect(raw, "episodes", list, "$")
    episodes = []
    for i, entry in enumerate(episodes_raw):
        path = f"episodes[{i}]"
        if not isinstance(entry, dict):
            raise ValidationError(path, "expected object")
        try:
            episodes.append(Episode(index=_expect(entry, "index", int, path), text=_expect(entry, "text", str, path)))
        except ValidationError as e:
            raise ValidationError(f"{path}.{e.field}", e.reason) from e

    try:
        return Story(
            story_id=story_id,
            title=title,
            genre=genre,
            key_items=tuple(key_items),
            episodes=tuple(episodes),
        )
    except ValidationError:
        raise


def story_to_dict(story: Story) -> dict:
    return {
        "story_id": story.story_id,
        "title": story.title,
        "genre": story.genre,
        "key_items": [{"item_id": k.item_id, "names": list(k.names)} for k in story.key_items],
        "episodes": [{"index": e.index, "text": e.text} for e in story.episodes],
    }


def serialize_story(story: Story) -> bytes:
    """Canonical UTF-8 JSON; equal stories always serialize byte-identically."""
    return canonical_bytes(story_to_dict(story))
