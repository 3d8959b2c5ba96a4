import numpy as np
import pytest

from conftest import make_event, make_scored
from idsgate.events import (
    GATE_ORDER,
    BadTruthLabel,
    EmptyFeatureVector,
    GateRecord,
    LayerId,
    RoutedEvent,
    RouteOutcome,
    ScoredEvent,
    Sink,
    make_event_id,
    validate_event,
    validate_trace,
)


def test_layer_and_sink_values_round_trip():
    assert LayerId("network") is LayerId.NETWORK
    assert Sink("review_bucket") is Sink.REVIEW_BUCKET
    assert [s.value for s in Sink] == [
        "known_accept",
        "memory_attack",
        "llm_attack",
        "review_bucket",
    ]


def test_scored_event_rejects_bad_label():
    with pytest.raises(ValueError):
        ScoredEvent(event=make_event(), pred_label=2, confidence=0.5)


def test_scored_event_rejects_out_of_range_confidence():
    with pytest.raises(ValueError):
        ScoredEvent(event=make_event(), pred_label=0, confidence=1.2)
    with pytest.raises(ValueError):
        ScoredEvent(event=make_event(), pred_label=0, confidence=-0.01)


def test_scored_event_accepts_boundaries():
    assert ScoredEvent(event=make_event(), pred_label=1, confidence=0.0).confidence == 0.0
    assert ScoredEvent(event=make_event(), pred_label=0, confidence=1.0).confidence == 1.0


def test_gate_record_rejects_unknown_gate():
    with pytest.raises(ValueError):
        GateRecord(gate="gate9", decision="known", score=0.9)


def test_trace_must_start_at_gate1():
    with pytest.raises(ValueError):
        validate_trace((GateRecord("gate2", "match", 0.1),))


def test_trace_must_not_skip_gates():
    with pytest.raises(ValueError):
        validate_trace(
            (GateRecord("gate1", "uncertain", 0.6), GateRecord("gate3", "attack", 0.9))
        )


def test_trace_prefixes_are_valid():
    g1 = GateRecord("gate1", "uncertain", 0.6)
    g2 = GateRecord("gate2", "no_match", 0.8)
    g3 = GateRecord("gate3", "attack_direct", 0.9)
    for trace in ((g1,), (g1, g2), (g1, g2, g3)):
        validate_trace(trace)


def test_trace_cannot_exceed_gate_order():
    g1 = GateRecord("gate1", "uncertain", 0.6)
    g2 = GateRecord("gate2", "no_match", 0.8)
    g3 = GateRecord("gate3", "review", 0.9)
    with pytest.raises(ValueError):
        validate_trace((g1, g2, g3, g3))
    assert GATE_ORDER == ("gate1", "gate2", "gate3")


def test_route_outcome_requires_trace():
    with pytest.raises(ValueError):
        RouteOutcome(sink=Sink.KNOWN_ACCEPT, trace=())


def test_validate_event_rejects_bad_truth():
    with pytest.raises(BadTruthLabel):
        validate_event(make_event(truth=3))


def test_validate_event_rejects_empty_features():
    with pytest.raises(EmptyFeatureVector):
        validate_event(make_event(features=np.array([])))


def test_validate_event_passes_through():
    e = make_event(truth=1)
    assert validate_event(e) is e


def test_final_label_promotes_attack_sinks():
    trace = (GateRecord("gate1", "uncertain", 0.6), GateRecord("gate2", "match", 0.02))
    routed = RoutedEvent(
        se=make_scored(0.6, pred_label=0),
        outcome=RouteOutcome(sink=Sink.MEMORY_ATTACK, trace=trace),
    )
    assert routed.final_label == 1
    assert not routed.deferred


def test_review_bucket_defers_and_keeps_model_label():
    trace = (
        GateRecord("gate1", "uncertain", 0.6),
        GateRecord("gate2", "no_match", 0.9),
        GateRecord("gate3", "review", 0.0),
    )
    routed = RoutedEvent(
        se=make_scored(0.6, pred_label=0),
        outcome=RouteOutcome(sink=Sink.REVIEW_BUCKET, trace=trace),
    )
    assert routed.final_label == 0
    assert routed.deferred


def test_known_accept_keeps_model_label():
    trace = (GateRecord("gate1", "known", 0.99),)
    routed = RoutedEvent(
        se=make_scored(0.99, pred_label=1),
        outcome=RouteOutcome(sink=Sink.KNOWN_ACCEPT, trace=trace),
    )
    assert routed.final_label == 1
    assert not routed.deferred


def test_make_event_id():
    assert make_event_id(LayerId.HYPERVISOR, 17) == "hypervisor-17"
