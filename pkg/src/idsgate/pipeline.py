"""Orchestration: run streams through the three gates and account for
every event.

The router walks a scored stream in order.  Confident events exit at
Gate-1.  The rest consult the attack-vector memory; matches exit at
Gate-2.  Survivors are batched (up to the configured parallelism),
analyzed by the LLM client, and re-serialized by ordinal before sinks
are assigned, so promotions enter the memory store in stream order and
a run is deterministic for a fixed configuration.  Promotions made by a
batch become visible to Gate-2 from the next batch on.

A failed LLM call downgrades only its own event (to UNSURE, confidence
0); the stream keeps flowing.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .events import (
    GateRecord,
    LayerId,
    RouteOutcome,
    RoutedEvent,
    ScoredEvent,
    Sink,
    Verdict,
)
from .llm import (
    FusionConfig,
    LlmCalibration,
    LlmSample,
    LlmThresholds,
    LlmHttpError,
    LlmTimeout,
    LlmVerdict,
    build_prompt,
    calibrate_llm_threshold,
    call_llm,
    gate3_decide,
    parse_verdict,
    prompt_sha256,
)
from .memory import (
    EmbeddingConfig,
    MatchConfig,
    MatchResult,
    MemoryRecord,
    MemorySource,
    MemoryStore,
    embed,
    match_decision,
)
from .outputs import LayerSummary, ReviewRecord, RunSummary, make_clock
from .qcal import CalibConfig, CalibrationResult, Gate1Route, calibrate, route_gate1

logger = logging.getLogger(__name__)

# Distance recorded in a gate-2 trace when the store had no neighbors at
# all; beyond any real cosine distance.
NO_NEIGHBOR_DISTANCE = 2.0


class Mode(str, Enum):
    STATIC = "static"
    ADAPTIVE = "adaptive"


class NoLabeledEvents(ValueError):
    """Metrics requested over a stream with no ground truth."""


class ZeroStaticBaseline(ValueError):
    """Cost comparison against zero static escalations."""


@dataclass
class PipelineConfig:
    mode: Mode = Mode.ADAPTIVE
    static_threshold: float = 0.85
    eval_count: int = 5000
    train_ratio: float = 0.8
    seed: int = 0
    c_event: float = 1.0
    llm_parallelism: int = 4
    wall_clock: bool = False
    calib: CalibConfig = field(default_factory=CalibConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    llm_thresholds: LlmThresholds = field(default_factory=LlmThresholds)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self) -> None:
        if self.c_event < 0:
            raise ValueError(f"c_event must be >= 0, got {self.c_event}")
        if self.llm_parallelism < 1:
            raise ValueError("llm_parallelism must be >= 1")


@dataclass
class LayerRun:
    """Everything one layer produced in one mode."""

    layer: LayerId
    mode: Mode
    threshold: float
    routed: list[RoutedEvent]
    summary: LayerSummary
    audits: list[dict]
    reviews: list[ReviewRecord]
    llm_calls: int


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    deferred: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "deferred": self.deferred,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }

    @staticmethod
    def merge(parts: list["Metrics"]) -> "Metrics":
        return Metrics(
            tp=sum(m.tp for m in parts),
            fp=sum(m.fp for m in parts),
            fn=sum(m.fn for m in parts),
            tn=sum(m.tn for m in parts),
            deferred=sum(m.deferred for m in parts),
        )


def compute_metrics(routed: list[RoutedEvent]) -> Metrics:
    """Confusion counts of the working verdicts against ground truth.

    Review-bucket events are scored with the base model's label and
    counted in ``deferred``; promotions count as attack predictions.

    Raises:
        NoLabeledEvents: nothing in the stream carries truth.
    """
    labeled = [r for r in routed if r.se.event.truth is not None]
    if not labeled:
        raise NoLabeledEvents("metrics require at least one labeled event")
    tp = fp = fn = tn = 0
    for r in labeled:
        pred, truth = r.final_label, r.se.event.truth
        if pred == 1 and truth == 1:
            tp += 1
        elif pred == 1:
            fp += 1
        elif truth == 1:
            fn += 1
        else:
            tn += 1
    return Metrics(tp=tp, fp=fp, fn=fn, tn=tn, deferred=sum(r.deferred for r in labeled))


@dataclass(frozen=True)
class CostReport:
    """Escalation volumes and the derived cost delta.

    reduction_pct is computed with exact rational arithmetic and
    rendered at two decimals in serialized form.
    """

    n_static: int
    n_adaptive: int
    delta: int
    reduction_pct: float
    c_event: float
    cost_static: float
    cost_adaptive: float
    cost_saving: float

    def to_dict(self) -> dict:
        return {
            "n_static": self.n_static,
            "n_adaptive": self.n_adaptive,
            "delta": self.delta,
            "reduction_pct": round(self.reduction_pct, 2),
            "c_event": self.c_event,
            "cost_static": self.cost_static,
            "cost_adaptive": self.cost_adaptive,
            "cost_saving": self.cost_saving,
        }


def cost_analysis(n_static: int, n_adaptive: int, c_event: float) -> CostReport:
    """Escalation cost model: total cost is volume times per-event cost.

    Raises:
        ZeroStaticBaseline: the static run escalated nothing.
        ValueError: negative cost per event.
    """
    if n_static <= 0:
        raise ZeroStaticBaseline("static escalation count must be positive")
    if c_event < 0:
        raise ValueError(f"c_event must be >= 0, got {c_event}")
    delta = n_static - n_adaptive
    reduction = Fraction(100 * delta, n_static)
    return CostReport(
        n_static=n_static,
        n_adaptive=n_adaptive,
        delta=delta,
        reduction_pct=float(reduction),
        c_event=c_event,
        cost_static=n_static * c_event,
        cost_adaptive=n_adaptive * c_event,
        cost_saving=delta * c_event,
    )


def route_stream(
    layer: LayerId,
    scored: list[ScoredEvent],
    threshold: float,
    cfg: PipelineConfig,
    store: MemoryStore,
    client,
    clock=None,
    mode: Mode | None = None,
) -> LayerRun:
    """Route one scored stream through the three gates.

    The returned LayerRun's summary is validated (the four sinks must
    partition the stream) before it is handed back.
    """
    clock = clock if clock is not None else make_clock(cfg.wall_clock)
    mode = mode if mode is not None else cfg.mode
    llm_tau = cfg.llm_thresholds.tau[layer]
    routed: list[RoutedEvent | None] = [None] * len(scored)
    audits: list[dict] = []
    reviews: list[ReviewRecord] = []
    tallies = {
        "known": 0,
        "uncertain": 0,
        "memory_matched": 0,
        "llm_attack": 0,
        "llm_benign": 0,
        "llm_unsure": 0,
        "llm_promoted": 0,
        "fusion_rejected": 0,
        "bucket": 0,
    }
    llm_calls = 0
    pending: list[tuple[int, ScoredEvent, MatchResult, GateRecord, GateRecord, str]] = []

    def flush() -> None:
        nonlocal llm_calls
        if not pending:
            return
        llm_calls += len(pending)
        prompts = [p[5] for p in pending]
        if cfg.llm_parallelism > 1 and len(prompts) > 1:
            with ThreadPoolExecutor(max_workers=cfg.llm_parallelism) as pool:
                raw_results = list(pool.map(lambda p: _guarded_call(p, client), prompts))
        else:
            raw_results = [_guarded_call(p, client) for p in prompts]
        for (i, se, match, t1, t2, prompt), (raw, error) in zip(pending, raw_results):
            if error is not None:
                logger.warning("llm failure for %s: %s", se.event.id, error)
                verdict = LlmVerdict(Verdict.UNSURE, 0.0, raw="")
            else:
                verdict = parse_verdict(raw)
            decision = gate3_decide(se, verdict, layer, cfg.llm_thresholds, cfg.fusion)
            tallies[f"llm_{verdict.decision.value.lower()}"] += 1
            promoted = decision.sink is Sink.LLM_ATTACK
            if promoted:
                tallies["llm_promoted"] += 1
                store.insert(
                    MemoryRecord(
                        id=se.event.id,
                        layer=layer,
                        vector=embed(se.event.raw, cfg.embedding),
                        attack_type=verdict.attack_type or "unknown",
                        source=MemorySource.LLM_PROMOTED,
                        created_at=clock.tick(),
                    )
                )
            else:
                tallies["bucket"] += 1
                if verdict.decision is Verdict.ATTACK:
                    tallies["fusion_rejected"] += 1
            t3 = GateRecord(
                gate="gate3",
                decision=f"attack_{decision.provenance.value}" if promoted else "review",
                score=decision.fused_score
                if decision.fused_score is not None
                else verdict.confidence,
            )
            outcome = RouteOutcome(
                sink=decision.sink, trace=(t1, t2, t3)
            )
            routed[i] = RoutedEvent(se, outcome)
            audits.append(
                {
                    "event_id": se.event.id,
                    "layer": layer.value,
                    "gate": "gate3",
                    "prompt_sha256": prompt_sha256(prompt),
                    "llm_label": verdict.decision.value,
                    "llm_confidence": verdict.confidence,
                    "sink": decision.sink.value,
                    "provenance": decision.provenance.value,
                    "fused_score": decision.fused_score,
                    "created_at": clock.tick(),
                }
            )
            if not promoted:
                reviews.append(
                    ReviewRecord(
                        event_id=se.event.id,
                        layer=layer.value,
                        model_label=se.pred_label,
                        model_confidence=se.confidence,
                        llm_label=verdict.decision.value,
                        llm_confidence=verdict.confidence,
                        attack_type=verdict.attack_type,
                        explanation=verdict.explanation,
                        fused_score=decision.fused_score,
                        gate_trace=outcome.trace,
                        created_at=clock.tick(),
                    )
                )
        pending.clear()

    for i, se in enumerate(scored):
        g1 = route_gate1(se, threshold)
        t1 = GateRecord(gate="gate1", decision=g1.value, score=se.confidence)
        if g1 is Gate1Route.KNOWN:
            tallies["known"] += 1
            routed[i] = RoutedEvent(se, RouteOutcome(sink=Sink.KNOWN_ACCEPT, trace=(t1,)))
            continue
        tallies["uncertain"] += 1
        match = match_decision(store, se.event.raw, cfg.match, cfg.embedding)
        nearest = (
            match.nearest_distance
            if math.isfinite(match.nearest_distance)
            else NO_NEIGHBOR_DISTANCE
        )
        t2 = GateRecord(
            gate="gate2",
            decision="match" if match.matched else "no_match",
            score=nearest,
        )
        audits.append(
            {
                "event_id": se.event.id,
                "layer": layer.value,
                "gate": "gate2",
                "nearest_distance": None
                if not math.isfinite(match.nearest_distance)
                else match.nearest_distance,
                "support": match.support,
                "meta_confidence": match.meta_confidence,
                "matched": match.matched,
                "record_id": match.record_id,
                "created_at": clock.tick(),
            }
        )
        if match.matched:
            tallies["memory_matched"] += 1
            routed[i] = RoutedEvent(
                se, RouteOutcome(sink=Sink.MEMORY_ATTACK, trace=(t1, t2))
            )
            continue
        pending.append((i, se, match, t1, t2, build_prompt(se, match)))
        if len(pending) >= cfg.llm_parallelism:
            flush()
    flush()

    assert all(r is not None for r in routed)
    done: list[RoutedEvent] = routed  # type: ignore[assignment]
    metrics = None
    if any(r.se.event.truth is not None for r in done):
        metrics = compute_metrics(done).to_dict()
    summary = LayerSummary(
        layer=layer.value,
        total=len(scored),
        known=tallies["known"],
        uncertain=tallies["uncertain"],
        memory_matched=tallies["memory_matched"],
        llm_attack=tallies["llm_attack"],
        llm_benign=tallies["llm_benign"],
        llm_unsure=tallies["llm_unsure"],
        llm_promoted=tallies["llm_promoted"],
        fusion_rejected=tallies["fusion_rejected"],
        bucket=tallies["bucket"],
        learned_threshold=threshold,
        llm_threshold=llm_tau,
        metrics=metrics,
    ).validate()
    return LayerRun(
        layer=layer,
        mode=mode,
        threshold=threshold,
        routed=done,
        summary=summary,
        audits=audits,
        reviews=reviews,
        llm_calls=llm_calls,
    )


def _guarded_call(prompt: str, client) -> tuple[str | None, Exception | None]:
    try:
        return call_llm(prompt, client), None
    except (LlmTimeout, LlmHttpError) as exc:
        return None, exc


def run_layer(
    layer: LayerId,
    scored: list[ScoredEvent],
    cfg: PipelineConfig,
    store: MemoryStore,
    client,
    calibration: CalibrationResult | None = None,
    clock=None,
    mode: Mode | None = None,
) -> LayerRun:
    """Route one layer in one mode.

    STATIC uses the fixed threshold from the config; ADAPTIVE requires a
    CalibrationResult (computed or loaded).
    """
    mode = mode if mode is not None else cfg.mode
    if mode is Mode.STATIC:
        threshold = cfg.static_threshold
    else:
        if calibration is None:
            raise ValueError("adaptive mode needs a calibration result")
        threshold = calibration.learned_threshold
    return route_stream(
        layer, scored, threshold, cfg, store, client, clock=clock, mode=mode
    )


def calibrate_gate1(
    train_scored: list[ScoredEvent], cfg: PipelineConfig
) -> CalibrationResult:
    return calibrate(train_scored, cfg.calib, cfg.seed)


def harvest_llm_samples(
    layer: LayerId,
    train_scored: list[ScoredEvent],
    cfg: PipelineConfig,
    client,
) -> list[LlmSample]:
    """Run the labeled calibration split's escalations through the LLM.

    Escalation is judged at the static default threshold against a
    fresh, empty memory so the harvested sample only reflects the
    analyst model, not earlier promotions.
    """
    store = MemoryStore(dims=cfg.embedding.dims)
    samples: list[LlmSample] = []
    for se in train_scored:
        if route_gate1(se, cfg.static_threshold) is Gate1Route.KNOWN:
            continue
        if se.event.truth is None:
            raise NoLabeledEvents(f"event {se.event.id} lacks truth")
        match = match_decision(store, se.event.raw, cfg.match, cfg.embedding)
        prompt = build_prompt(se, match)
        raw, error = _guarded_call(prompt, client)
        verdict = (
            parse_verdict(raw) if error is None else LlmVerdict(Verdict.UNSURE, 0.0)
        )
        samples.append(
            LlmSample(
                confidence=verdict.confidence,
                decision=verdict.decision,
                truth=se.event.truth,
            )
        )
    return samples


def calibrate_llm_for_layer(
    layer: LayerId,
    train_scored: list[ScoredEvent],
    cfg: PipelineConfig,
    client,
) -> LlmCalibration:
    samples = harvest_llm_samples(layer, train_scored, cfg, client)
    return calibrate_llm_threshold(samples, cfg.llm_thresholds.p_min)


@dataclass
class ModeRun:
    mode: Mode
    layer_runs: dict[LayerId, LayerRun]

    @property
    def total_uncertain(self) -> int:
        return sum(lr.summary.uncertain for lr in self.layer_runs.values())

    @property
    def total_llm_calls(self) -> int:
        return sum(lr.llm_calls for lr in self.layer_runs.values())

    def overall_metrics(self) -> Metrics | None:
        parts = [
            compute_metrics(lr.routed)
            for lr in self.layer_runs.values()
            if any(r.se.event.truth is not None for r in lr.routed)
        ]
        return Metrics.merge(parts) if parts else None


LAYER_ORDER = (LayerId.NETWORK, LayerId.HOST, LayerId.HYPERVISOR)


def run_mode(
    scored_by_layer: dict[LayerId, list[ScoredEvent]],
    calibrations: dict[LayerId, CalibrationResult],
    mode: Mode,
    cfg: PipelineConfig,
    make_store,
    make_client,
) -> tuple[ModeRun, RunSummary]:
    """Run every layer once in one mode and summarize.

    One clock spans the whole run, so audit and review timestamps are
    ordered across layers and a seeded run reproduces byte-identical
    artifacts.
    """
    clock = make_clock(cfg.wall_clock)
    started = clock.tick()
    layer_runs: dict[LayerId, LayerRun] = {}
    for layer in LAYER_ORDER:
        if layer not in scored_by_layer:
            continue
        layer_runs[layer] = run_layer(
            layer,
            scored_by_layer[layer],
            cfg,
            store=make_store(layer, mode),
            client=make_client(layer, mode),
            calibration=calibrations.get(layer),
            clock=clock,
            mode=mode,
        )
    finished = clock.tick()
    mode_run = ModeRun(mode=mode, layer_runs=layer_runs)
    overall_metrics = mode_run.overall_metrics()
    overall = {
        "total": sum(lr.summary.total for lr in layer_runs.values()),
        "known": sum(lr.summary.known for lr in layer_runs.values()),
        "uncertain": mode_run.total_uncertain,
        "memory_matched": sum(lr.summary.memory_matched for lr in layer_runs.values()),
        "llm_promoted": sum(lr.summary.llm_promoted for lr in layer_runs.values()),
        "bucket": sum(lr.summary.bucket for lr in layer_runs.values()),
        "llm_calls": mode_run.total_llm_calls,
        "metrics": overall_metrics.to_dict() if overall_metrics else None,
    }
    summary = RunSummary(
        mode=mode.value,
        seed=cfg.seed,
        started_at=started,
        finished_at=finished,
        layers=tuple(lr.summary for lr in layer_runs.values()),
        overall=overall,
    )
    return mode_run, summary


@dataclass
class Comparison:
    static: ModeRun
    adaptive: ModeRun
    static_summary: RunSummary
    adaptive_summary: RunSummary
    cost: CostReport


def compare_modes(
    scored_by_layer: dict[LayerId, list[ScoredEvent]],
    calibrations: dict[LayerId, CalibrationResult],
    cfg: PipelineConfig,
    make_store,
    make_client,
) -> Comparison:
    """Run both modes over identical scored streams and price the gap.

    ``make_store(layer, mode)`` and ``make_client(layer, mode)`` supply
    fresh per-run dependencies so the two modes cannot contaminate each
    other.  Scores are computed once by the caller and shared; equal
    confidence multisets across modes are asserted per layer.
    """
    static_run, static_summary = run_mode(
        scored_by_layer, calibrations, Mode.STATIC, cfg, make_store, make_client
    )
    adaptive_run, adaptive_summary = run_mode(
        scored_by_layer, calibrations, Mode.ADAPTIVE, cfg, make_store, make_client
    )

    for layer in scored_by_layer:
        static_confs = sorted(
            r.se.confidence for r in static_run.layer_runs[layer].routed
        )
        adaptive_confs = sorted(
            r.se.confidence for r in adaptive_run.layer_runs[layer].routed
        )
        if static_confs != adaptive_confs:
            raise AssertionError(
                f"layer {layer.value}: modes saw different confidence multisets"
            )

    cost = cost_analysis(
        static_run.total_uncertain, adaptive_run.total_uncertain, cfg.c_event
    )
    return Comparison(
        static=static_run,
        adaptive=adaptive_run,
        static_summary=static_summary,
        adaptive_summary=adaptive_summary,
        cost=cost,
    )
