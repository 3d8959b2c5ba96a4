import json
import random

import pytest

from conftest import make_scored
from idsgate.events import LayerId, Sink
from idsgate.llm import EchoLlmClient, LlmTimeout, MockLlmClient
from idsgate.memory import MemoryStore
from idsgate.pipeline import (
    Comparison,
    Metrics,
    Mode,
    NoLabeledEvents,
    PipelineConfig,
    ZeroStaticBaseline,
    calibrate_gate1,
    calibrate_llm_for_layer,
    compare_modes,
    compute_metrics,
    cost_analysis,
    harvest_llm_samples,
    route_stream,
    run_layer,
    run_mode,
)
from idsgate.qcal import CalibConfig, CalibrationResult


def fresh_store(cfg):
    return MemoryStore(dims=cfg.embedding.dims)


def host_stream(rows, prefix="host"):
    """rows: (confidence, pred_label, truth) or (confidence, pred, truth, raw)."""
    rng = random.Random(17)
    out = []
    for i, row in enumerate(rows):
        conf, pred, truth = row[:3]
        raw = row[3] if len(row) > 3 else " ".join(
            f"w{rng.randrange(1 << 24):06x}" for _ in range(6)
        )
        out.append(
            make_scored(conf, pred_label=pred, truth=truth, event_id=f"{prefix}-{i}", layer=LayerId.HOST, raw=raw)
        )
    return out


def echo_for(stream, confidence=0.9):
    return EchoLlmClient(
        {se.event.id: se.event.truth for se in stream}, confidence=confidence
    )


def test_compute_metrics_confusion_counts():
    cfg = PipelineConfig()
    stream = host_stream(
        [
            (0.9, 1, 1),   # known, correct attack
            (0.9, 1, 0),   # known, false alarm
            (0.9, 0, 1),   # known, missed attack
            (0.9, 0, 0),   # known, correct benign
        ]
    )
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), echo_for(stream))
    m = compute_metrics(run.routed)
    assert (m.tp, m.fp, m.fn, m.tn) == (1, 1, 1, 1)
    assert m.accuracy == 0.5
    assert m.precision == 0.5
    assert m.recall == 0.5
    assert m.f1 == 0.5
    assert m.deferred == 0


def test_compute_metrics_requires_labels():
    cfg = PipelineConfig()
    stream = host_stream([(0.9, 0, None)])
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), echo_for(stream))
    with pytest.raises(NoLabeledEvents):
        compute_metrics(run.routed)


def test_metrics_merge_adds_counts():
    a = Metrics(tp=1, fp=2, fn=3, tn=4, deferred=1)
    b = Metrics(tp=10, fp=20, fn=30, tn=40, deferred=2)
    merged = Metrics.merge([a, b])
    assert (merged.tp, merged.fp, merged.fn, merged.tn, merged.deferred) == (11, 22, 33, 44, 3)


def test_cost_analysis_simple_numbers():
    report = cost_analysis(200, 80, c_event=2.0)
    assert report.delta == 120
    assert report.reduction_pct == 60.0
    assert report.cost_static == 400.0
    assert report.cost_adaptive == 160.0
    assert report.cost_saving == 240.0


def test_cost_analysis_rounds_only_in_serialized_form():
    report = cost_analysis(3, 1, c_event=1.0)
    assert report.reduction_pct == pytest.approx(200 / 3)
    assert report.to_dict()["reduction_pct"] == 66.67


def test_cost_analysis_rejects_zero_baseline():
    with pytest.raises(ZeroStaticBaseline):
        cost_analysis(0, 0, c_event=1.0)


def test_cost_analysis_rejects_negative_cost():
    with pytest.raises(ValueError):
        cost_analysis(10, 5, c_event=-0.5)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(c_event=-1.0)
    with pytest.raises(ValueError):
        PipelineConfig(llm_parallelism=0)


def test_confident_stream_never_reaches_the_llm():
    cfg = PipelineConfig()
    stream = host_stream([(0.86 + i * 0.001, i % 2, i % 2) for i in range(20)])
    client = echo_for(stream)
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), client)
    assert run.summary.known == 20
    assert run.summary.uncertain == 0
    assert run.llm_calls == 0
    assert client.calls == 0
    assert all(r.outcome.sink is Sink.KNOWN_ACCEPT for r in run.routed)


def test_escalated_attacks_promoted_and_benigns_reviewed():
    cfg = PipelineConfig()
    stream = host_stream(
        [(0.60, 1, 1), (0.55, 0, 1), (0.58, 0, 0), (0.91, 1, 1), (0.62, 1, 0)]
    )
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), echo_for(stream))
    s = run.summary
    assert s.known == 1
    assert s.uncertain == 4
    assert s.llm_attack == 2  # the two escalated truth-attacks
    assert s.llm_benign == 2
    assert s.llm_promoted == 2
    assert s.fusion_rejected == 0
    assert s.bucket == 2
    assert run.llm_calls == 4
    # Promotion overrides the model's label; review keeps it.
    by_id = {r.se.event.id: r for r in run.routed}
    assert by_id["host-1"].final_label == 1  # model said benign, echo knew better
    assert by_id["host-1"].outcome.sink is Sink.LLM_ATTACK
    assert by_id["host-2"].outcome.sink is Sink.REVIEW_BUCKET
    assert by_id["host-2"].deferred is True
    assert by_id["host-4"].final_label == 1  # deferred keeps the model label


def test_promotions_match_from_the_next_batch_on():
    cfg = PipelineConfig(llm_parallelism=4)
    attack_raw = "sshd pid=1003 auth_fail user=root attempts=30 src=10.0.3.7"
    rows = [(0.60, 1, 1, attack_raw)]
    rows += [(0.55, 0, 0) for _ in range(3)]  # fill the first batch
    rows += [(0.60, 1, 1, attack_raw)]  # same payload, later batch
    stream = host_stream(rows)
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), echo_for(stream))
    assert run.llm_calls == 4
    assert run.summary.memory_matched == 1
    by_id = {r.se.event.id: r for r in run.routed}
    assert by_id["host-0"].outcome.sink is Sink.LLM_ATTACK
    assert by_id["host-4"].outcome.sink is Sink.MEMORY_ATTACK
    assert by_id["host-4"].final_label == 1
    gate2 = by_id["host-4"].outcome.trace[1]
    assert gate2.decision == "match"
    assert gate2.score == pytest.approx(0.0, abs=1e-12)


def test_same_batch_duplicates_both_reach_the_llm():
    cfg = PipelineConfig(llm_parallelism=4)
    attack_raw = "apache2 pid=1007 syscall=execve path=/var/www/u3.sh parent=apache2"
    stream = host_stream([(0.60, 1, 1, attack_raw), (0.60, 1, 1, attack_raw)])
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), echo_for(stream))
    assert run.llm_calls == 2
    assert run.summary.memory_matched == 0
    assert run.summary.llm_promoted == 2


class FailingClient:
    def __init__(self):
        self.calls = 0

    def generate(self, prompt):
        self.calls += 1
        raise LlmTimeout("no analyst available")


def test_llm_failure_downgrades_to_review():
    cfg = PipelineConfig()
    stream = host_stream([(0.60, 1, 1), (0.90, 1, 1)])
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), FailingClient())
    s = run.summary
    assert s.llm_unsure == 1
    assert s.bucket == 1
    assert s.known == 1
    by_id = {r.se.event.id: r for r in run.routed}
    assert by_id["host-0"].outcome.sink is Sink.REVIEW_BUCKET
    assert run.reviews[0].llm_label == "UNSURE"
    assert run.reviews[0].llm_confidence == 0.0


def test_fusion_rejected_lands_in_bucket():
    cfg = PipelineConfig()
    weak_attack = json.dumps({"label": "ATTACK", "confidence": 0.55})
    client = MockLlmClient({}, default_response=weak_attack)
    stream = host_stream([(0.50, 1, 1)])
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), client)
    s = run.summary
    # 0.2 * 0.50 + 0.8 * 0.55 = 0.54 misses the 0.61 fusion cutoff.
    assert s.llm_attack == 1
    assert s.llm_promoted == 0
    assert s.fusion_rejected == 1
    assert s.bucket == 1
    assert run.routed[0].outcome.sink is Sink.REVIEW_BUCKET
    assert run.reviews[0].fused_score == pytest.approx(0.54)


def test_fusion_promotion_records_provenance():
    cfg = PipelineConfig()
    borderline_attack = json.dumps({"label": "ATTACK", "confidence": 0.58})
    client = MockLlmClient({}, default_response=borderline_attack)
    stream = host_stream([(0.90, 1, 1)])
    run = route_stream(LayerId.HOST, stream, 0.95, cfg, fresh_store(cfg), client)
    assert run.summary.llm_promoted == 1
    assert run.summary.fusion_rejected == 0
    gate3 = run.routed[0].outcome.trace[2]
    assert gate3.decision == "attack_fusion"
    assert gate3.score == pytest.approx(0.644)


def test_route_stream_audit_trail_shape():
    cfg = PipelineConfig()
    stream = host_stream([(0.60, 1, 1), (0.90, 0, 0)])
    run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), echo_for(stream))
    gates = [a["gate"] for a in run.audits]
    assert gates == ["gate2", "gate3"]
    g2, g3 = run.audits
    assert g2["matched"] is False
    assert g2["nearest_distance"] is None  # empty store has no neighbors
    assert len(g3["prompt_sha256"]) == 64
    assert g3["provenance"] == "direct"
    assert g2["created_at"] < g3["created_at"]


def test_parallelism_does_not_change_results():
    rows = [(0.5 + (i % 40) * 0.01, i % 2, (i * 3) % 2) for i in range(60)]
    base = None
    for workers in (1, 4):
        cfg = PipelineConfig(llm_parallelism=workers)
        stream = host_stream(rows)
        run = route_stream(LayerId.HOST, stream, 0.85, cfg, fresh_store(cfg), echo_for(stream))
        sinks = [r.outcome.sink for r in run.routed]
        if base is None:
            base = (run.summary, sinks)
        else:
            assert run.summary == base[0]
            assert sinks == base[1]


def test_run_layer_static_uses_config_threshold():
    cfg = PipelineConfig(static_threshold=0.85)
    stream = host_stream([(0.86, 0, 0), (0.84, 0, 0)])
    run = run_layer(
        LayerId.HOST, stream, cfg, fresh_store(cfg), echo_for(stream), mode=Mode.STATIC
    )
    assert run.threshold == 0.85
    assert run.summary.known == 1


def test_run_layer_adaptive_needs_calibration():
    cfg = PipelineConfig()
    stream = host_stream([(0.9, 0, 0)])
    with pytest.raises(ValueError):
        run_layer(LayerId.HOST, stream, cfg, fresh_store(cfg), echo_for(stream), mode=Mode.ADAPTIVE)


def test_run_layer_adaptive_uses_learned_threshold():
    cfg = PipelineConfig()
    calibration = CalibrationResult(
        learned_threshold=0.62, episodes=20, action_histogram={0.62: 10}
    )
    stream = host_stream([(0.63, 0, 0), (0.61, 0, 0)])
    run = run_layer(
        LayerId.HOST,
        stream,
        cfg,
        fresh_store(cfg),
        echo_for(stream),
        calibration=calibration,
        mode=Mode.ADAPTIVE,
    )
    assert run.threshold == 0.62
    assert run.summary.known == 1
    assert run.summary.learned_threshold == 0.62


def test_harvest_llm_samples_covers_exactly_the_escalations():
    cfg = PipelineConfig()
    stream = host_stream([(0.90, 1, 1), (0.60, 1, 1), (0.55, 0, 0), (0.86, 0, 0)])
    samples = harvest_llm_samples(LayerId.HOST, stream, cfg, echo_for(stream, confidence=0.88))
    assert len(samples) == 2
    assert all(s.confidence == 0.88 for s in samples)
    assert [s.truth for s in samples] == [1, 0]


def test_harvest_llm_samples_requires_labels():
    cfg = PipelineConfig()
    stream = host_stream([(0.60, 1, None)])
    with pytest.raises(NoLabeledEvents):
        harvest_llm_samples(LayerId.HOST, stream, cfg, echo_for(stream))


def test_calibrate_llm_for_layer_with_perfect_analyst():
    cfg = PipelineConfig()
    stream = host_stream([(0.6, 1, i % 2) for i in range(20)])
    cal = calibrate_llm_for_layer(LayerId.HOST, stream, cfg, echo_for(stream))
    # A perfect analyst is feasible everywhere; ties resolve to the
    # lowest candidate threshold.
    assert cal.feasible is True
    assert cal.threshold == 0.05
    assert cal.precision == 1.0
    assert cal.recall == 1.0


def test_calibrate_gate1_delegates_to_qcal():
    cfg = PipelineConfig(calib=CalibConfig(episodes=3))
    stream = host_stream([(0.5 + (i % 45) * 0.01, i % 2, i % 2) for i in range(400)])
    result = calibrate_gate1(stream, cfg)
    assert result.learned_threshold in cfg.calib.actions.thresholds
    assert result.episodes == 3


def test_run_mode_aggregates_layers():
    cfg = PipelineConfig()
    net = [
        make_scored(c, pred_label=p, truth=t, event_id=f"network-{i}", layer=LayerId.NETWORK)
        for i, (c, p, t) in enumerate([(0.9, 0, 0), (0.6, 1, 1), (0.88, 1, 1)])
    ]
    host = host_stream([(0.9, 0, 0), (0.55, 0, 0)])
    truths = {se.event.id: se.event.truth for se in net + host}
    scored = {LayerId.NETWORK: net, LayerId.HOST: host}
    mode_run, summary = run_mode(
        scored,
        {},
        Mode.STATIC,
        cfg,
        make_store=lambda layer, mode: fresh_store(cfg),
        make_client=lambda layer, mode: EchoLlmClient(truths),
    )
    assert set(mode_run.layer_runs) == {LayerId.NETWORK, LayerId.HOST}
    assert summary.mode == "static"
    assert summary.overall["total"] == 5
    assert summary.overall["known"] == 3
    assert summary.overall["uncertain"] == 2
    assert summary.overall["llm_calls"] == 2
    assert summary.started_at == "2000-01-01T00:00:00Z"
    assert summary.overall["metrics"]["tp"] == 2
    # Layers are summarized in routing order.
    assert [ls.layer for ls in summary.layers] == ["network", "host"]


def test_compare_modes_prices_the_escalation_gap():
    cfg = PipelineConfig()
    rows = [(0.5 + (i % 45) * 0.01, i % 2, i % 2) for i in range(200)]
    stream = host_stream(rows)
    truths = {se.event.id: se.event.truth for se in stream}
    calibration = CalibrationResult(
        learned_threshold=0.60, episodes=20, action_histogram={0.60: 5}
    )
    comparison = compare_modes(
        {LayerId.HOST: stream},
        {LayerId.HOST: calibration},
        cfg,
        make_store=lambda layer, mode: fresh_store(cfg),
        make_client=lambda layer, mode: EchoLlmClient(truths),
    )
    assert isinstance(comparison, Comparison)
    n_static = sum(1 for se in stream if se.confidence < 0.85)
    n_adaptive = sum(1 for se in stream if se.confidence < 0.60)
    assert comparison.cost.n_static == n_static
    assert comparison.cost.n_adaptive == n_adaptive
    assert comparison.cost.delta == n_static - n_adaptive
    assert comparison.static_summary.mode == "static"
    assert comparison.adaptive_summary.mode == "adaptive"
    assert comparison.adaptive.layer_runs[LayerId.HOST].threshold == 0.60
