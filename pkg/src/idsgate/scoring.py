"""Feature extraction and base-model scoring.

Three extraction modes cover the three layers: numeric passthrough for
flow records, hashed-free tf-idf for host log text, and one-hot plus
numerics for hypervisor events.  Scoring is either a replay of stored
(label, confidence) pairs or a small built-in logistic model trained on
labeled events.  Confidence is always ``max(p, 1 - p)`` of the attack
probability, so it lives in [0.5, 1.0] for a binary model.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .events import Event, LayerId, ScoredEvent

logger = logging.getLogger(__name__)

TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")

DEFAULT_MAX_VOCAB = 4096
DEFAULT_MIN_DF = 1

REPLAY_CSV_HEADER = ["event_id", "layer", "pred_label", "confidence", "truth"]


class EmptyCorpus(ValueError):
    """tf-idf fit was handed an empty corpus."""


class DimensionMismatch(ValueError):
    """Raw record does not provide the columns the extractor expects."""


class UnfittedExtractor(RuntimeError):
    """Text extractor used before fit."""


class MissingReplayEntry(KeyError):
    """Replay table has no row for the scored event id."""


class SingleClassData(ValueError):
    """Training data holds fewer than two classes."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on any non-alphanumeric run; drops empties."""
    return [t for t in TOKEN_SPLIT.split(text.lower()) if t]


class FeatureMode(str, Enum):
    NUMERIC_PASSTHROUGH = "numeric_passthrough"
    TFIDF_TEXT = "tfidf_text"
    CATEGORICAL_EVENT = "categorical_event"


@dataclass
class FeatureExtractor:
    """Layer-specific raw-record-to-vector transform.

    For NUMERIC_PASSTHROUGH, ``columns`` indexes the comma-separated raw
    record.  For TFIDF_TEXT, ``vocab``/``doc_freq``/``idf`` come from
    :func:`fit_tfidf` and dims equals the vocabulary size.  For
    CATEGORICAL_EVENT, the vector is the one-hot blocks for each
    categorical field (declared order) followed by the numeric fields.
    """

    layer: LayerId
    mode: FeatureMode
    dims: int = 0
    # numeric passthrough
    columns: tuple[int, ...] = ()
    # tf-idf text
    vocab: dict[str, int] | None = None
    doc_freq: dict[str, int] | None = None
    idf: np.ndarray | None = None
    # categorical events
    numeric_fields: tuple[str, ...] = ()
    categorical_fields: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode is FeatureMode.NUMERIC_PASSTHROUGH:
            self.dims = len(self.columns)
        elif self.mode is FeatureMode.CATEGORICAL_EVENT:
            self.dims = len(self.numeric_fields) + sum(
                len(vals) for vals in self.categorical_fields.values()
            )
        elif self.vocab is not None:
            self.dims = len(self.vocab)


def fit_tfidf(
    corpus: list[str],
    layer: LayerId = LayerId.HOST,
    min_df: int = DEFAULT_MIN_DF,
    max_vocab: int = DEFAULT_MAX_VOCAB,
) -> FeatureExtractor:
    """Fit a tf-idf vocabulary over a text corpus.

    idf(term) = ln((1 + N) / (1 + df)) + 1 with N the corpus size.  The
    vocabulary keeps at most ``max_vocab`` terms, most frequent first
    (ties broken by term so the fit is deterministic), and indexes them
    in sorted term order.

    Raises:
        EmptyCorpus: the corpus has no documents.
    """
    if not corpus:
        raise EmptyCorpus("cannot fit tf-idf on an empty corpus")
    df: dict[str, int] = {}
    for doc in corpus:
        for term in set(tokenize(doc)):
            df[term] = df.get(term, 0) + 1
    kept = [t for t, n in df.items() if n >= min_df]
    kept.sort(key=lambda t: (-df[t], t))
    kept = sorted(kept[:max_vocab])
    vocab = {term: i for i, term in enumerate(kept)}
    n_docs = len(corpus)
    idf = np.array(
        [math.log((1 + n_docs) / (1 + df[t])) + 1.0 for t in kept], dtype=np.float64
    )
    return FeatureExtractor(
        layer=layer,
        mode=FeatureMode.TFIDF_TEXT,
        dims=len(vocab),
        vocab=vocab,
        doc_freq={t: df[t] for t in kept},
        idf=idf,
    )


def fit_categorical(
    layer: LayerId,
    numeric_fields: tuple[str, ...],
    categorical_fields: dict[str, tuple[str, ...]],
) -> FeatureExtractor:
    """Build a categorical-event extractor from explicit field lists."""
    return FeatureExtractor(
        layer=layer,
        mode=FeatureMode.CATEGORICAL_EVENT,
        numeric_fields=tuple(numeric_fields),
        categorical_fields={k: tuple(v) for k, v in categorical_fields.items()},
    )


def _safe_float(text: str) -> float:
    # Non-finite and unparseable values become 0.0 by contract.
    try:
        value = float(text)
    except (TypeError, ValueError):
        return 0.0
    return value if math.isfinite(value) else 0.0


def parse_kv_record(raw: str) -> dict[str, str]:
    """Parse a ``key=value key=value`` record into a dict."""
    out: dict[str, str] = {}
    for tok in raw.split():
        if "=" in tok:
            key, _, value = tok.partition("=")
            out[key] = value
    return out


def extract_features(event: Event, extractor: FeatureExtractor) -> np.ndarray:
    """Turn an event's raw record into the layer's feature vector.

    Non-finite inputs map to 0.0.  The result length always equals
    ``extractor.dims``.

    Raises:
        UnfittedExtractor: TFIDF_TEXT extractor with no vocabulary.
        DimensionMismatch: numeric record with too few columns.
    """
    if extractor.mode is FeatureMode.NUMERIC_PASSTHROUGH:
        cells = event.raw.split(",")
        if extractor.columns and max(extractor.columns) >= len(cells):
            raise DimensionMismatch(
                f"event {event.id}: record has {len(cells)} columns, "
                f"extractor needs index {max(extractor.columns)}"
            )
        return np.array([_safe_float(cells[i]) for i in extractor.columns], dtype=np.float64)

    if extractor.mode is FeatureMode.TFIDF_TEXT:
        if extractor.vocab is None or extractor.idf is None:
            raise UnfittedExtractor("tf-idf extractor used before fit")
        vec = np.zeros(extractor.dims, dtype=np.float64)
        for term in tokenize(event.raw):
            idx = extractor.vocab.get(term)
            if idx is not None:
                vec[idx] += 1.0
        if not vec.any():
            # No vocabulary terms present: zero vector, normalization skipped.
            return vec
        vec *= extractor.idf
        return vec / np.linalg.norm(vec)

    fields = parse_kv_record(event.raw)
    parts: list[float] = []
    for name, values in extractor.categorical_fields.items():
        seen = fields.get(name)
        for v in values:
            parts.append(1.0 if seen == v else 0.0)
    for name in extractor.numeric_fields:
        parts.append(_safe_float(fields.get(name, "")))
    return np.array(parts, dtype=np.float64)


class ScorerKind(str, Enum):
    REPLAY = "replay"
    BASELINE_LOGISTIC = "baseline_logistic"


@dataclass(frozen=True)
class ReplayRow:
    pred_label: int
    confidence: float
    truth: int | None = None


@dataclass
class Scorer:
    """Base model: either a replay table keyed by event id or logistic
    weights over the event's feature vector."""

    kind: ScorerKind
    replay: dict[str, ReplayRow] | None = None
    weights: np.ndarray | None = None
    bias: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    """Deterministic logistic training schedule."""

    epochs: int = 200
    learning_rate: float = 0.1
    l2: float = 1e-4
    seed: int = 0


def _sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500.0, 500.0)))


def train_baseline(events: list[Event], cfg: TrainConfig) -> Scorer:
    """Train the built-in logistic stand-in on labeled events.

    Full-batch gradient descent with a fixed schedule.  Features are
    standardized internally and the affine transform is folded back into
    the returned weights, so the scorer applies directly to raw vectors.
    The same (events, cfg) always yields identical weights.

    Raises:
        SingleClassData: fewer than two truth classes present.
    """
    labeled = [e for e in events if e.truth is not None]
    classes = {e.truth for e in labeled}
    if len(classes) < 2:
        raise SingleClassData(
            f"logistic training needs both classes, got {sorted(classes)}"
        )
    x = np.stack([e.features for e in labeled]).astype(np.float64)
    y = np.array([e.truth for e in labeled], dtype=np.float64)

    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma[sigma == 0.0] = 1.0
    z = (x - mu) / sigma

    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, 0.01, size=z.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(cfg.epochs):
        p = _sigmoid(z @ w + b)
        err = p - y
        grad_w = z.T @ err / n + cfg.l2 * w
        grad_b = float(err.mean())
        w = w - cfg.learning_rate * grad_w
        b = b - cfg.learning_rate * grad_b

    # Fold standardization into raw-space weights: w.((x-mu)/sigma)+b.
    w_raw = w / sigma
    b_raw = b - float((w * (mu / sigma)).sum())
    return Scorer(kind=ScorerKind.BASELINE_LOGISTIC, weights=w_raw, bias=b_raw)


def make_replay_scorer(table: dict[str, ReplayRow]) -> Scorer:
    return Scorer(kind=ScorerKind.REPLAY, replay=table)


def score(event: Event, scorer: Scorer) -> ScoredEvent:
    """Score one event.

    Logistic: p = sigmoid(w.x + b); pred_label is 1 when p > 0.5 (the
    exact tie predicts benign) and confidence is max(p, 1 - p).  Replay
    returns the stored pair verbatim.

    Raises:
        MissingReplayEntry: replay scorer has no row for the event id.
    """
    if scorer.kind is ScorerKind.REPLAY:
        assert scorer.replay is not None
        row = scorer.replay.get(event.id)
        if row is None:
            raise MissingReplayEntry(event.id)
        return ScoredEvent(event=event, pred_label=row.pred_label, confidence=row.confidence)

    assert scorer.weights is not None
    p = float(_sigmoid(float(np.dot(scorer.weights, event.features)) + scorer.bias))
    pred = 1 if p > 0.5 else 0
    return ScoredEvent(event=event, pred_label=pred, confidence=max(p, 1.0 - p))


def score_stream(events: list[Event], scorer: Scorer) -> list[ScoredEvent]:
    return [score(e, scorer) for e in events]


def load_replay_csv(path: str) -> dict[str, ReplayRow]:
    """Load a replay table.

    Expected header: ``event_id,layer,pred_label,confidence,truth``; the
    truth cell may be empty for unlabeled rows.
    """
    table: dict[str, ReplayRow] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(REPLAY_CSV_HEADER) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"replay csv {path} missing columns: {sorted(missing)}")
        for row in reader:
            truth = row["truth"].strip()
            table[row["event_id"]] = ReplayRow(
                pred_label=int(row["pred_label"]),
                confidence=float(row["confidence"]),
                truth=int(truth) if truth else None,
            )
    return table


def events_from_replay(
    table: dict[str, ReplayRow], layer: LayerId, raw: str = ""
) -> list[Event]:
    """Build placeholder events for replayed scores.

    Replay rows carry no payload, so events get a single zero feature and
    an empty raw record unless the caller supplies one.
    """
    placeholder = np.zeros(1, dtype=np.float64)
    return [
        Event(id=eid, layer=layer, raw=raw, features=placeholder, truth=row.truth)
        for eid, row in table.items()
    ]
