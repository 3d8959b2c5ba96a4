"""Gate-2: embedded memory of previously confirmed attack vectors.

Stores unit-normalized token-hash embeddings of attack payloads and
answers "have we seen something close to this before" with a linear
cosine scan.  Only attacks are stored; a strong match short-circuits the
LLM stage.  The store is small by design (promotions trickle in one at a
time), so exact scan beats any index and keeps results deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .events import LayerId
from .scoring import tokenize

logger = logging.getLogger(__name__)

MIN_EMBED_DIMS = 16


class DimMismatch(ValueError):
    """Vector length differs from the store's embedding dimension."""


class MemorySource(str, Enum):
    LLM_PROMOTED = "llm_promoted"
    MEMORY_SEEDED = "memory_seeded"


@dataclass(frozen=True)
class EmbeddingConfig:
    dims: int = 256

    def __post_init__(self) -> None:
        if self.dims < MIN_EMBED_DIMS:
            raise ValueError(f"embedding dims must be >= {MIN_EMBED_DIMS}")


@dataclass(frozen=True)
class MatchConfig:
    """Decision thresholds for memory matches.

    A near-duplicate (nearest within ``exact_radius``) always matches.
    Otherwise the nearest hit must fall within ``near_radius`` and be
    backed by at least ``min_support`` of the k neighbors inside
    ``support_radius`` with a meta-confidence of at least ``min_meta``.
    """

    k: int = 5
    exact_radius: float = 0.05
    near_radius: float = 0.15
    support_radius: float = 0.30
    min_support: int = 3
    min_meta: float = 0.70


def _bucket(token: str, dims: int) -> int:
    # Process-stable hash; Python's hash() is salted per run.
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % dims


def embed(text: str, cfg: EmbeddingConfig) -> np.ndarray:
    """Token-count embedding: hash each token into a bucket, L2-normalize.

    Empty or token-free text embeds to the zero vector.
    """
    vec = np.zeros(cfg.dims, dtype=np.float64)
    for token in tokenize(text):
        vec[_bucket(token, cfg.dims)] += 1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0.0 else vec


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity; zero-magnitude vectors get similarity 0."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    sim = float(np.dot(a, b) / (na * nb))
    return min(max(1.0 - sim, 0.0), 2.0)


@dataclass(frozen=True, eq=False)
class MemoryRecord:
    id: str
    layer: LayerId
    vector: np.ndarray
    attack_type: str
    source: MemorySource
    created_at: str


@dataclass(frozen=True)
class MatchResult:
    matched: bool
    nearest_distance: float
    support: int
    meta_confidence: float
    record_id: str | None = None


class MemoryStore:
    """In-process vector store with optional JSONL persistence.

    When bound to a path, every insert appends one line; reloading keeps
    the last occurrence of a duplicated id.
    """

    def __init__(self, dims: int, path: str | None = None):
        self.dims = dims
        self.path = path
        self._records: list[MemoryRecord] = []
        self._index: dict[str, int] = {}
        # Stacked-vector cache so queries scan in one matvec.
        self._matrix: np.ndarray | None = None
        self._norms: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[MemoryRecord]:
        return list(self._records)

    def insert(self, record: MemoryRecord) -> None:
        if len(record.vector) != self.dims:
            raise DimMismatch(
                f"record {record.id}: vector has {len(record.vector)} dims, store expects {self.dims}"
            )
        pos = self._index.get(record.id)
        if pos is not None:
            logger.warning("memory record %s overwritten", record.id)
            self._records[pos] = record
        else:
            self._index[record.id] = len(self._records)
            self._records.append(record)
        self._matrix = None
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(_record_to_dict(record)) + "\n")

    def _stacked(self) -> tuple[np.ndarray, np.ndarray]:
        if self._matrix is None:
            self._matrix = np.vstack([rec.vector for rec in self._records])
            self._norms = np.linalg.norm(self._matrix, axis=1)
        return self._matrix, self._norms

    def query(self, vector: np.ndarray, k: int) -> list[tuple[MemoryRecord, float]]:
        """k nearest records by cosine distance, distance then id order."""
        if len(vector) != self.dims:
            raise DimMismatch(
                f"query vector has {len(vector)} dims, store expects {self.dims}"
            )
        if not self._records:
            return []
        vnorm = float(np.linalg.norm(vector))
        if vnorm == 0.0:
            dists = np.ones(len(self._records))
        else:
            matrix, norms = self._stacked()
            sims = np.zeros(len(self._records))
            nonzero = norms > 0.0
            sims[nonzero] = (matrix[nonzero] @ vector) / (norms[nonzero] * vnorm)
            dists = np.clip(1.0 - sims, 0.0, 2.0)
        scored = [(rec, float(d)) for rec, d in zip(self._records, dists)]
        scored.sort(key=lambda pair: (pair[1], pair[0].id))
        return scored[:k]


def match_decision(
    store: MemoryStore,
    text: str,
    mcfg: MatchConfig,
    ecfg: EmbeddingConfig,
) -> MatchResult:
    """Decide whether stored attack vectors explain this payload.

    Support counts neighbors within the support radius of the k
    retrieved; meta-confidence is (support / k) times the mean closeness
    (1 - distance) of the supporting neighbors, zero when nothing
    supports.  An empty store never matches.
    """
    neighbors = store.query(embed(text, ecfg), mcfg.k)
    if not neighbors:
        return MatchResult(
            matched=False, nearest_distance=math.inf, support=0, meta_confidence=0.0
        )
    nearest_rec, nearest = neighbors[0]
    supporting = [d for _, d in neighbors if d <= mcfg.support_radius]
    support = len(supporting)
    if support:
        meta = (support / mcfg.k) * (sum(1.0 - d for d in supporting) / support)
    else:
        meta = 0.0
    matched = nearest <= mcfg.exact_radius or (
        nearest <= mcfg.near_radius and support >= mcfg.min_support and meta >= mcfg.min_meta
    )
    return MatchResult(
        matched=matched,
        nearest_distance=nearest,
        support=support,
        meta_confidence=meta,
        record_id=nearest_rec.id,
    )


def _record_to_dict(record: MemoryRecord) -> dict:
    return {
        "id": record.id,
        "layer": record.layer.value,
        "vector": [float(x) for x in record.vector],
        "attack_type": record.attack_type,
        "source": record.source.value,
        "created_at": record.created_at,
    }


def _record_from_dict(data: dict) -> MemoryRecord:
    return MemoryRecord(
        id=data["id"],
        layer=LayerId(data["layer"]),
        vector=np.array(data["vector"], dtype=np.float64),
        attack_type=data["attack_type"],
        source=MemorySource(data["source"]),
        created_at=data["created_at"],
    )


def load_store(path: str, dims: int, bind: bool = True) -> MemoryStore:
    """Load a JSONL store file; missing file yields an empty store.

    With ``bind`` the returned store appends future inserts to the same
    file.
    """
    store = MemoryStore(dims=dims, path=None)
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = _record_from_dict(json.loads(line))
                if len(record.vector) != dims:
                    raise DimMismatch(
                        f"stored record {record.id} has {len(record.vector)} dims, expected {dims}"
                    )
                # insert() handles duplicate ids: last line wins.
                store.insert(record)
    if bind:
        store.path = path
    return store


def save_store(store: MemoryStore, path: str) -> None:
    """Rewrite the store file compactly (drops overwritten duplicates)."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in store.records:
            fh.write(json.dumps(_record_to_dict(record)) + "\n")
