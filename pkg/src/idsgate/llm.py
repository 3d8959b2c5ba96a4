"""Gate-3: LLM escalation, verdict parsing, thresholding, and fusion.

Events that survive the first two gates are summarized into a prompt
and sent to an analyst model (a real HTTP endpoint or a deterministic
mock).  The reply is parsed into an (ATTACK | BENIGN | UNSURE, confidence)
verdict; a per-layer confidence threshold, calibrated under a precision
floor, decides whether the verdict is accepted directly.  An ATTACK
verdict below its threshold gets one more chance through score fusion
with the base model; everything else lands in the review bucket.

Fusion arithmetic is exact: weights and confidences are treated as the
decimal values they print as, so 0.2*0.5 + 0.8*0.7 is 0.66, not a float
approximation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import time
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from enum import Enum

import requests

from .events import LayerId, ScoredEvent, Sink, Verdict
from .memory import MatchResult

logger = logging.getLogger(__name__)

DEFAULT_PRECISION_FLOOR = 0.80
DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 2
DEFAULT_BACKOFF = 0.5

# Reference per-layer acceptance thresholds; a calibration run replaces
# them for the data actually in front of it.
DEFAULT_LLM_THRESHOLDS = {
    LayerId.NETWORK: 0.69,
    LayerId.HOST: 0.61,
    LayerId.HYPERVISOR: 0.89,
}

DEFAULT_MOCK_RESPONSE = json.dumps(
    {
        "label": "UNSURE",
        "confidence": 0.0,
        "attack_type": "",
        "explanation": "no canned response for this prompt",
    }
)

_EVENT_ID_LINE = re.compile(r"^event_id: (\S+)$", re.MULTILINE)


class LlmTimeout(RuntimeError):
    """The endpoint did not answer within the deadline (after retries)."""


class LlmHttpError(RuntimeError):
    """The endpoint answered with an error or an unusable body."""


class BadFusionWeights(ValueError):
    """Fusion weights do not sum to 1."""


class NoAttackSamples(ValueError):
    """Threshold calibration needs at least one true attack sample."""


@dataclass(frozen=True)
class LlmVerdict:
    decision: Verdict
    confidence: float
    attack_type: str = ""
    explanation: str = ""
    raw: str = ""


@dataclass(frozen=True)
class LlmThresholds:
    """Per-layer LLM acceptance thresholds plus the precision floor used
    to calibrate them."""

    tau: dict[LayerId, float] = field(
        default_factory=lambda: dict(DEFAULT_LLM_THRESHOLDS)
    )
    p_min: float = DEFAULT_PRECISION_FLOOR


@dataclass(frozen=True)
class FusionConfig:
    """Weighted fusion of model and LLM confidence.

    The fused score is w_model * c_model + w_llm * c_llm with the
    per-layer fusion threshold defaulting to the layer's LLM threshold.
    """

    w_model: float = 0.20
    w_llm: float = 0.80
    fusion_tau: dict[LayerId, float] = field(
        default_factory=lambda: dict(DEFAULT_LLM_THRESHOLDS)
    )


class Provenance(str, Enum):
    """How a Gate-3 outcome was reached."""

    DIRECT = "direct"
    FUSION = "fusion"
    NONE = "none"


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def build_prompt(se: ScoredEvent, match: MatchResult | None = None) -> str:
    """Render the analyst prompt for one escalated event.

    The prompt is a pure function of the scored event and the memory
    lookup: identical inputs produce identical bytes, which is what lets
    a hash-keyed mock stand in for a live model.
    """
    event = se.event
    payload = event.raw if event.raw else "(no payload)"
    model_label = "ATTACK" if se.pred_label == 1 else "BENIGN"
    if match is None or not math.isfinite(match.nearest_distance):
        memory_line = "no stored attack patterns"
    else:
        memory_line = (
            f"nearest stored attack at distance {match.nearest_distance:.4f}, "
            f"support {match.support}"
        )
    return (
        f"Security analyst task: classify one {event.layer.value} "
        "intrusion-detection event.\n"
        f"event_id: {event.id}\n"
        f"payload: {payload}\n"
        f"model: label={model_label} confidence={se.confidence:.4f}\n"
        f"memory: {memory_line}\n"
        "Respond with a single JSON object with keys \"label\" (ATTACK, "
        "BENIGN or UNSURE), \"confidence\" (a number from 0 to 1), "
        "\"attack_type\", and \"explanation\".\n"
    )


class HttpLlmClient:
    """Client for an Ollama-style generate endpoint.

    POSTs ``{"model", "prompt", "stream": false}`` to
    ``<base_url>/api/generate`` and reads the ``response`` field of the
    JSON body.  Timeouts and 5xx responses are retried with exponential
    backoff before giving up.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        backoff: float = DEFAULT_BACKOFF,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def generate(self, prompt: str) -> str:
        url = f"{self.base_url}/api/generate"
        body = {"model": self.model, "prompt": prompt, "stream": False}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = requests.post(url, json=body, timeout=self.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_error = exc
                logger.warning("llm request failed (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last_error = LlmHttpError(f"server error {resp.status_code}")
                logger.warning(
                    "llm server error %d (attempt %d)", resp.status_code, attempt + 1
                )
                continue
            if resp.status_code != 200:
                raise LlmHttpError(f"unexpected status {resp.status_code}")
            try:
                return resp.json()["response"]
            except (ValueError, KeyError) as exc:
                raise LlmHttpError(f"malformed response body: {exc}") from exc
        if isinstance(last_error, requests.Timeout):
            raise LlmTimeout(f"no answer from {url} after {self.retries + 1} attempts")
        raise LlmHttpError(str(last_error))


class MockLlmClient:
    """Deterministic stand-in keyed by the SHA-256 of the prompt.

    The table maps prompt hashes to canned response texts; prompts with
    no entry get the configured default response.
    """

    def __init__(self, table: dict[str, str], default_response: str = DEFAULT_MOCK_RESPONSE):
        self.table = dict(table)
        self.default_response = default_response
        self.calls = 0

    @classmethod
    def from_jsonl(cls, path: str, default_response: str = DEFAULT_MOCK_RESPONSE) -> "MockLlmClient":
        table: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                table[entry["prompt_sha256"]] = entry["response"]
        return cls(table, default_response)

    def generate(self, prompt: str) -> str:
        self.calls += 1
        return self.table.get(prompt_sha256(prompt), self.default_response)


class EchoLlmClient:
    """Evaluation oracle: answers with the event's ground truth.

    Useful for end-to-end runs on synthetic corpora where the question
    is how the routing behaves, not how good the analyst model is.  The
    event id is read back out of the prompt; unknown ids get UNSURE.
    """

    def __init__(
        self,
        truths: dict[str, int],
        confidence: float = 0.9,
        attack_types: dict[str, str] | None = None,
    ):
        self.truths = truths
        self.confidence = confidence
        self.attack_types = attack_types or {}
        self.calls = 0

    def generate(self, prompt: str) -> str:
        self.calls += 1
        m = _EVENT_ID_LINE.search(prompt)
        truth = self.truths.get(m.group(1)) if m else None
        if truth is None:
            return DEFAULT_MOCK_RESPONSE
        label = "ATTACK" if truth == 1 else "BENIGN"
        attack_type = self.attack_types.get(m.group(1), "") if truth == 1 else ""
        return json.dumps(
            {
                "label": label,
                "confidence": self.confidence,
                "attack_type": attack_type,
                "explanation": "ground-truth echo",
            }
        )


def call_llm(prompt: str, client) -> str:
    """Send one prompt; propagates LlmTimeout / LlmHttpError from the
    client so the caller can downgrade the event."""
    return client.generate(prompt)


def parse_verdict(text: str) -> LlmVerdict:
    """Parse a model reply into a verdict.  Total: never raises.

    The first JSON object found in the text is used.  Labels map
    case-insensitively onto the verdict vocabulary; confidence is
    clamped into [0, 1] (out-of-range values are clamped and logged).
    Anything unparseable yields (UNSURE, 0.0) with the raw text kept.
    """
    obj = _first_json_object(text)
    if obj is None:
        logger.warning("unparseable llm reply (%d chars)", len(text))
        return LlmVerdict(Verdict.UNSURE, 0.0, raw=text)

    label = str(obj.get("label", "")).strip().upper()
    try:
        decision = Verdict[label]
    except KeyError:
        logger.warning("unknown llm label %r", label)
        return LlmVerdict(Verdict.UNSURE, 0.0, raw=text)

    try:
        confidence = float(obj.get("confidence", 0.0))
    except (TypeError, ValueError):
        logger.warning("non-numeric llm confidence %r", obj.get("confidence"))
        confidence = 0.0
    if not math.isfinite(confidence):
        confidence = 0.0
    if confidence < 0.0 or confidence > 1.0:
        logger.warning("llm confidence %r clamped into [0, 1]", confidence)
        confidence = min(max(confidence, 0.0), 1.0)

    return LlmVerdict(
        decision=decision,
        confidence=confidence,
        attack_type=str(obj.get("attack_type") or ""),
        explanation=str(obj.get("explanation") or ""),
        raw=text,
    )


def _first_json_object(text: str) -> dict | None:
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(text, idx)
        except json.JSONDecodeError:
            idx = text.find("{", idx + 1)
            continue
        if isinstance(obj, dict):
            return obj
        idx = text.find("{", idx + 1)
    return None


@dataclass(frozen=True)
class LlmSample:
    """One calibration observation: what the LLM said vs. the truth."""

    confidence: float
    decision: Verdict
    truth: int


@dataclass(frozen=True)
class LlmCalibration:
    threshold: float
    feasible: bool
    precision: float
    recall: float


def default_threshold_grid() -> tuple[float, ...]:
    """Candidate thresholds 0.05 to 0.95 inclusive, step 0.01."""
    return tuple(round(0.05 + 0.01 * i, 2) for i in range(91))


def calibrate_llm_threshold(
    samples: list[LlmSample],
    p_min: float = DEFAULT_PRECISION_FLOOR,
    grid: tuple[float, ...] | None = None,
) -> LlmCalibration:
    """Pick the LLM acceptance threshold under a precision floor.

    A sample is predicted attack at threshold t when its decision is
    ATTACK and its confidence is at least t.  Among thresholds whose
    precision meets the floor, the one with maximum recall wins (ties to
    the lowest threshold).  If no threshold is feasible the highest
    candidate is returned with ``feasible=False``.

    Raises:
        NoAttackSamples: no sample has truth 1.
    """
    candidates = grid if grid is not None else default_threshold_grid()
    n_attacks = sum(1 for s in samples if s.truth == 1)
    if n_attacks == 0:
        raise NoAttackSamples("calibration sample has no true attacks")

    best: tuple[float, float, float] | None = None  # (recall, -t) ordering
    for t in candidates:
        tp = fp = 0
        for s in samples:
            if s.decision is Verdict.ATTACK and s.confidence >= t:
                if s.truth == 1:
                    tp += 1
                else:
                    fp += 1
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / n_attacks
        if precision >= p_min:
            if best is None or recall > best[1]:
                best = (t, recall, precision)
    if best is None:
        logger.warning("no threshold reaches precision %.2f; calibration failed", p_min)
        return LlmCalibration(
            threshold=max(candidates), feasible=False, precision=0.0, recall=0.0
        )
    t, recall, precision = best
    return LlmCalibration(threshold=t, feasible=True, precision=precision, recall=recall)


def direct_decide(v: LlmVerdict, layer: LayerId, th: LlmThresholds) -> Verdict:
    """Accept the LLM's label only at or above the layer threshold."""
    tau = th.tau[layer]
    if v.decision is Verdict.ATTACK and v.confidence >= tau:
        return Verdict.ATTACK
    if v.decision is Verdict.BENIGN and v.confidence >= tau:
        return Verdict.BENIGN
    return Verdict.UNSURE


def _dfrac(x: float) -> Fraction:
    # Decimal semantics: the float is read as the decimal it prints as.
    return Fraction(Decimal(repr(float(x))))


def _fuse_fraction(c_model: float, c_llm: float, fc: FusionConfig) -> Fraction:
    w_m, w_l = _dfrac(fc.w_model), _dfrac(fc.w_llm)
    if abs(w_m + w_l - 1) > Fraction(1, 10**9):
        raise BadFusionWeights(f"weights {fc.w_model} + {fc.w_llm} do not sum to 1")
    return w_m * _dfrac(c_model) + w_l * _dfrac(c_llm)


def fuse(c_model: float, c_llm: float, fc: FusionConfig) -> float:
    """Exact convex combination of the two confidences.

    Raises:
        BadFusionWeights: weights do not sum to 1.
    """
    return float(_fuse_fraction(c_model, c_llm, fc))


def fallback_decide(
    se: ScoredEvent, v: LlmVerdict, layer: LayerId, fc: FusionConfig
) -> tuple[bool, float]:
    """Fusion fallback for an ATTACK verdict that missed its threshold.

    Returns (promote, fused_score): promote is true when the fused score
    reaches the layer's fusion threshold.

    Raises:
        ValueError: called for a verdict that is not ATTACK.
    """
    if v.decision is not Verdict.ATTACK:
        raise ValueError("fusion fallback only applies to ATTACK verdicts")
    fused = _fuse_fraction(se.confidence, v.confidence, fc)
    promote = fused >= _dfrac(fc.fusion_tau[layer])
    return promote, float(fused)


@dataclass(frozen=True)
class Gate3Decision:
    sink: Sink
    provenance: Provenance
    fused_score: float | None = None


def gate3_decide(
    se: ScoredEvent,
    v: LlmVerdict,
    layer: LayerId,
    th: LlmThresholds,
    fc: FusionConfig,
) -> Gate3Decision:
    """Route one escalated event on its LLM verdict.

    The direct rule runs first; only an ATTACK verdict below threshold
    goes through fusion.  BENIGN and UNSURE outcomes land in the review
    bucket (benign calls are kept for human confirmation, not silently
    accepted).
    """
    direct = direct_decide(v, layer, th)
    if direct is Verdict.ATTACK:
        return Gate3Decision(sink=Sink.LLM_ATTACK, provenance=Provenance.DIRECT)
    if direct is Verdict.BENIGN:
        return Gate3Decision(sink=Sink.REVIEW_BUCKET, provenance=Provenance.DIRECT)
    if v.decision is Verdict.ATTACK:
        promote, fused = fallback_decide(se, v, layer, fc)
        if promote:
            return Gate3Decision(
                sink=Sink.LLM_ATTACK, provenance=Provenance.FUSION, fused_score=fused
            )
        return Gate3Decision(
            sink=Sink.REVIEW_BUCKET, provenance=Provenance.NONE, fused_score=fused
        )
    return Gate3Decision(sink=Sink.REVIEW_BUCKET, provenance=Provenance.NONE)
