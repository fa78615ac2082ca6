"""Canonical JSON serialization and atomic file writes.

Every artifact this package writes (stories, states, summaries, reports,
cache entries) goes through `canonical_dumps` so that equal values always
produce byte-equal files. That is what makes replay runs comparable with
a plain byte diff.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any


def canonical_dumps(obj: Any, *, indent: int | None = None) -> str:
    """Serialize with sorted keys and no trailing whitespace."""
    if indent is None:
        return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=indent)


def canonical_bytes(obj: Any, *, indent: int | None = 2) -> bytes:
    """UTF-8 bytes of the canonical form, newline-terminated."""
    return (canonical_dumps(obj, indent=indent) + "\n").encode("utf-8")


def atomic_write(path: Path | str, data: bytes) -> None:
    """Write via temp-file-then-rename so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_if_changed(path: Path | str, data: bytes) -> bool:
    """Write only when content differs; returns True if a write happened.

    Skipping identical writes keeps mtimes stable, which is what makes
    re-running commands on unchanged inputs a no-op.
    """
    path = Path(path)
    if path.exists() and path.read_bytes() == data:
        return False
    atomic_write(path, data)
    return True
