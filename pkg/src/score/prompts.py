"""Prompt template loading.

Templates are plain-text files with $name placeholders (string.Template
syntax, so literal JSON braces need no escaping). A project may override
any template by shipping its own copy under `prompts/`; the package data
provides the defaults.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from string import Template

from .errors import ContractError

TEMPLATE_NAMES = ("extract_states", "summarize", "evaluate", "answer", "sentiment", "repair")


def load(name: str, root: Path | str | None = None) -> str:
    """Load a template by name, preferring `root/<name>.txt` when present."""
    if name not in TEMPLATE_NAMES:
        raise ContractError(f"unknown prompt template {name!r}")
    if root is not None:
        candidate = Path(root) / f"{name}.txt"
        if candidate.exists():
            return candidate.read_text("utf-8")
    return resources.files("score").joinpath(f"prompts/{name}.txt").read_text("utf-8")


def render(template: str, **fields: str) -> str:
    try:
        return Template(template).substitute(**fields)
    except (KeyError, ValueError) as e:
        raise ContractError(f"prompt template placeholder error: {e}") from e


def default_templates() -> dict[str, str]:
    """Name -> text for all bundled templates (used to seed a project)."""
    return {name: load(name) for name in TEMPLATE_NAMES}
