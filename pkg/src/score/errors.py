"""Exception hierarchy shared across the package.

Library code raises these and never calls sys.exit; the CLI maps them
to exit codes in one place.
"""

from __future__ import annotations


class ScoreError(Exception):
    """Base class for every error raised by this package."""


class ContractError(ScoreError):
    """A caller violated a documented precondition."""


class ValidationError(ScoreError):
    """Schema or invariant violation, naming the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.reason = message


class StoryParseError(ScoreError):
    """Input document is not parseable at all (as opposed to invalid)."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class PersistenceError(ScoreError):
    """Corrupt, truncated, or version-mismatched on-disk artifact."""


class TransportError(ScoreError):
    """Remote backend unreachable or persistently failing."""


class UncachedRequestError(ScoreError):
    """Replay-mode request whose key is absent from the cache."""


class GatewayReplyError(ScoreError):
    """A backend reply could not be used; carries the raw reply text."""

    def __init__(self, message: str, raw_reply: str = ""):
        super().__init__(message)
        self.raw_reply = raw_reply


class ExtractionError(GatewayReplyError):
    """Item-state extraction reply was unusable after the repair attempt."""


class SummaryError(GatewayReplyError):
    """Episode-summary reply was unusable after the repair attempt."""


class EvaluationError(GatewayReplyError):
    """Evaluation reply was unusable after the repair attempt."""


class SentimentError(GatewayReplyError):
    """Sentiment reply was unusable after the reprompt."""
