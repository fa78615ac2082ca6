"""Exact flat vector store with cosine top-N search.

Corpora here are thousands of units, so a full scan is both fast enough
and exactly testable against a brute-force oracle; there is deliberately
no approximate structure. Vectors are unit-normalized at insertion, which
turns search into a dot product, and ties break on entry_id so results
are reproducible.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ContractError, PersistenceError
from .jsonio import canonical_bytes, write_if_changed

_MAGIC = b"SCIX"
_VERSION = 1
_HEADER = struct.Struct("<4sIIQI")  # magic, version, dim, count, payload crc32


@dataclass(frozen=True, eq=False)
class IndexEntry:
    """A stored unit; `embedding` is kept unit-normalized."""

    entry_id: str
    kind: str  # "chunk" | "summary"
    story_id: str
    episode_index: int
    embedding: np.ndarray


@dataclass(frozen=True)
class SearchHit:
    entry_id: str
    score: float


def _as_vector(values, dim: int | None = None) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise ContractError(f"embedding must be one-dimensional, got shape {vec.shape}")
    if dim is not None and vec.shape[0] != dim:
        raise ContractError(f"dimension mismatch: expected {dim}, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise ContractError("embedding contains non-finite values")
    return vec


def cosine(u, v) -> float:
    """Cosine similarity of two raw (not necessarily normalized) vectors."""
    u = _as_vector(u)
    v = _as_vector(v, dim=u.shape[0])
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ContractError("cosine is undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


class FlatIndex:
    """Append-then-freeze store; search is safe from any number of threads once frozen."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise ContractError(f"dimension must be positive, got {dim}")
        self._dim = dim
        self._entries: list[IndexEntry] = []
        self._by_id: dict[str, int] = {}
        self._matrix: np.ndarray | None = None
        self._frozen = False

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def entries(self) -> tuple[IndexEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def add(
        self,
        entry_id: str,
        embedding,
        *,
        kind: str = "summary",
        story_id: str = "",
        episode_index: int = 0,
    ) -> None:
        if self._frozen:
            raise ContractError("index is frozen")
        if entry_id in self._by_id:
            raise ContractError(f"duplicate entry_id {entry_id!r}")
        vec = _as_vector(embedding, dim=self._dim)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ContractError("zero vector rejected")
        entry = IndexEntry(
            entry_id=entry_id,
            kind=kind,
            story_id=story_id,
            episode_index=episode_index,
            embedding=vec / norm,
        )
        self._by_id[entry_id] = len(self._entries)
        self._entries.append(entry)
        self._matrix = None

    def freeze(self) -> "FlatIndex":
        self._frozen = True
        self._materialize()
        return self

    def _materialize(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack([e.embedding for e in self._entries]) if self._entries else np.zeros((0, self._dim))
        return self._matrix

    def get(self, entry_id: str) -> IndexEntry:
        return self._entries[self._by_id[entry_id]]

    def search_top_n(
        self,
        query,
        n: int,
        filter: Callable[[IndexEntry], bool] | None = None,
    ) -> list[SearchHit]:
        """Top-n entries by cosine, ties broken by entry_id ascending.

        Returns min(n, matching entries) hits; an empty index is an error.
        """
        if not self._entries:
            raise ContractError("index empty")
        if n <= 0:
            raise ContractError(f"n must be positive, got {n}")
        vec = _as_vector(query, dim=self._dim)
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ContractError("zero query vector")
        unit = vec / norm
        # per-row dot, not a matrix product: BLAS kernels differ from np.dot
        # in the last ulp, which would break exact oracle equality on ties
        scores = [float(np.dot(entry.embedding, unit)) for entry in self._entries]
        candidates = [
            i for i, entry in enumerate(self._entries) if filter is None or filter(entry)
        ]
        candidates.sort(key=lambda i: (-scores[i], self._entries[i].entry_id))
        return [
            SearchHit(entry_id=self._entries[i].entry_id, score=float(scores[i]))
            for i in candidates[:n]
        ]

    # -- persistence --------------------------------------------------------

    def save(self, base: Path | str) -> None:
        """Write `<base>.vec` (binary vectors) and `<base>.meta.json`."""
        base = Path(base)
        matrix = self._materialize()
        payload = np.ascontiguousarray(matrix, dtype="<f8").tobytes()
        header = _HEADER.pack(_MAGIC, _VERSION, self._dim, len(self._entries), zlib.crc32(payload))
        write_if_changed(base.with_suffix(".vec"), header + payload)
        meta = {
            "format_version": _VERSION,
            "dim": self._dim,
            "count": len(self._entries),
            "entries": [
                {
                    "entry_id": e.entry_id,
                    "kind": e.kind,
                    "story_id": e.story_id,
                    "episode_index": e.episode_index,
                }
                for e in self._entries
            ],
        }
        write_if_changed(base.with_suffix(".meta.json"), canonical_bytes(meta))

    @classmethod
    def load(cls, base: Path | str) -> "FlatIndex":
        """Load a saved index; the result is frozen."""
        import json

        base = Path(base)
        vec_path = base.with_suffix(".vec")
        meta_path = base.with_suffix(".meta.json")
        raw = vec_path.read_bytes()
        if len(raw) < _HEADER.size:
            raise PersistenceError(f"{vec_path}: too short to be an index file")
        magic, version, dim, count, crc = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise PersistenceError(f"{vec_path}: bad magic {magic!r}")
        if version != _VERSION:
            raise PersistenceError(f"{vec_path}: unsupported format version {version}")
        payload = raw[_HEADER.size :]
        expected = count * dim * 8
        if len(payload) != expected:
            raise PersistenceError(f"{vec_path}: truncated payload ({len(payload)} of {expected} bytes)")
        if zlib.crc32(payload) != crc:
            raise PersistenceError(f"{vec_path}: checksum mismatch")
        matrix = np.frombuffer(payload, dtype="<f8").reshape(count, dim)

        meta = json.loads(meta_path.read_text("utf-8"))
        if meta.get("count") != count or meta.get("dim") != dim:
            raise PersistenceError(f"{meta_path}: metadata does not match vector file")
        index = cls(dim)
        for row, entry in zip(matrix, meta["entries"]):
            index._by_id[entry["entry_id"]] = len(index._entries)
            index._entries.append(
                IndexEntry(
                    entry_id=entry["entry_id"],
                    kind=entry["kind"],
                    story_id=entry["story_id"],
                    episode_index=entry["episode_index"],
                    embedding=np.array(row, dtype=np.float64),
                )
            )
        if len(index._entries) != count:
            raise PersistenceError(f"{meta_path}: entry list shorter than count")
        return index.freeze()


def build_index(dim: int, rows: Iterable[tuple[str, str, str, int, np.ndarray]]) -> FlatIndex:
    """Assemble and freeze an index from (entry_id, kind, story_id, episode, vector) rows."""
    index = FlatIndex(dim)
    for entry_id, kind, story_id, episode_index, vec in rows:
        index.add(entry_id, vec, kind=kind, story_id=story_id, episode_index=episode_index)
    return index.freeze()
