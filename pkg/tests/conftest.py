from __future__ import annotations

import pytest

from score.gateway import GatewayConfig, LlmGateway
from score.story import Episode, KeyItem, Story


@pytest.fixture
def mock_gateway() -> LlmGateway:
    return LlmGateway(GatewayConfig(backend="mock"))


@pytest.fixture
def small_story() -> Story:
    return Story(
        story_id="tale-1",
        title="The Lantern Road",
        genre="fantasy",
        key_items=(
            KeyItem(item_id="lantern", names=("lantern",)),
            KeyItem(item_id="sword", names=("sword", "blade")),
        ),
        episodes=(
            Episode(index=0, text="Mira carried the lantern through the gate. The morning felt bright and hopeful."),
            Episode(index=1, text="The lantern shattered on the stone floor. A gloomy dread settled over the village."),
            Episode(index=2, text="Mira held the sword up to the light. The road wound past the village at dusk."),
        ),
    )


def make_story(texts: list[str], items: list[str], story_id: str = "s") -> Story:
    return Story(
        story_id=story_id,
        title="t",
        genre="other",
        key_items=tuple(KeyItem(item_id=i, names=(i,)) for i in items),
        episodes=tuple(Episode(index=k, text=t) for k, t in enumerate(texts)),
    )
