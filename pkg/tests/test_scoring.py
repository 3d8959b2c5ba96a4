import math
import random

import numpy as np
import pytest

from conftest import make_event
from idsgate.events import Event, LayerId
from idsgate.scoring import (
    DimensionMismatch,
    EmptyCorpus,
    FeatureExtractor,
    FeatureMode,
    MissingReplayEntry,
    ReplayRow,
    Scorer,
    ScorerKind,
    SingleClassData,
    TrainConfig,
    UnfittedExtractor,
    events_from_replay,
    extract_features,
    fit_categorical,
    fit_tfidf,
    load_replay_csv,
    make_replay_scorer,
    parse_kv_record,
    score,
    score_stream,
    tokenize,
    train_baseline,
)


def test_tokenize_lowercases_and_splits():
    assert tokenize("Dst Port=21, Protocol=6") == ["dst", "port", "21", "protocol", "6"]
    assert tokenize("...") == []


def test_parse_kv_record():
    rec = parse_kv_record("sshd pid=1003 auth_fail user=root attempts=9")
    assert rec == {"pid": "1003", "user": "root", "attempts": "9"}


def test_tfidf_idf_matches_hand_formula():
    fx = fit_tfidf(["alpha beta", "alpha gamma"])
    # Oracle: recompute idf for each term from document frequency.
    df = {"alpha": 2, "beta": 1, "gamma": 1}
    for term, idx in fx.vocab.items():
        expected = math.log((1 + 2) / (1 + df[term])) + 1.0
        assert fx.idf[idx] == pytest.approx(expected, abs=1e-12)
    assert sorted(fx.vocab) == ["alpha", "beta", "gamma"]


def test_tfidf_vectors_are_unit_norm():
    fx = fit_tfidf(["alpha beta", "alpha gamma", "beta beta delta"])
    e = make_event(raw="alpha beta unseen", layer=LayerId.HOST)
    vec = extract_features(e, fx)
    assert vec.shape == (fx.dims,)
    assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-12)


def test_tfidf_repeated_terms_count():
    fx = fit_tfidf(["alpha beta", "alpha gamma"])
    once = extract_features(make_event(raw="beta alpha"), fx)
    twice = extract_features(make_event(raw="beta beta alpha"), fx)
    # More beta mass tilts the unit vector toward the beta axis.
    assert twice[fx.vocab["beta"]] > once[fx.vocab["beta"]]


def test_tfidf_zero_vector_for_unseen_text():
    fx = fit_tfidf(["alpha beta"])
    vec = extract_features(make_event(raw="zeta theta"), fx)
    assert not vec.any()


def test_tfidf_vocab_cap_keeps_most_frequent():
    corpus = ["common rare1", "common rare2", "common other", "other filler"]
    fx = fit_tfidf(corpus, max_vocab=2)
    # df: common=3, other=2, rest 1; cap keeps the top two by frequency.
    assert sorted(fx.vocab) == ["common", "other"]


def test_tfidf_cap_ties_break_on_term():
    fx = fit_tfidf(["aa bb", "cc dd"], max_vocab=2)
    # All df=1: alphabetical order decides.
    assert sorted(fx.vocab) == ["aa", "bb"]


def test_tfidf_empty_corpus_raises():
    with pytest.raises(EmptyCorpus):
        fit_tfidf([])


def test_unfitted_text_extractor_raises():
    fx = FeatureExtractor(layer=LayerId.HOST, mode=FeatureMode.TFIDF_TEXT)
    with pytest.raises(UnfittedExtractor):
        extract_features(make_event(raw="alpha"), fx)


def test_numeric_passthrough_selects_columns():
    fx = FeatureExtractor(
        layer=LayerId.NETWORK,
        mode=FeatureMode.NUMERIC_PASSTHROUGH,
        columns=(0, 2),
    )
    vec = extract_features(make_event(raw="1.5,9,-3.25"), fx)
    assert vec.tolist() == [1.5, -3.25]
    assert fx.dims == 2


def test_numeric_passthrough_nonfinite_to_zero():
    fx = FeatureExtractor(
        layer=LayerId.NETWORK, mode=FeatureMode.NUMERIC_PASSTHROUGH, columns=(0, 1, 2)
    )
    vec = extract_features(make_event(raw="nan,inf,bogus"), fx)
    assert vec.tolist() == [0.0, 0.0, 0.0]


def test_numeric_passthrough_missing_column_raises():
    fx = FeatureExtractor(
        layer=LayerId.NETWORK, mode=FeatureMode.NUMERIC_PASSTHROUGH, columns=(0, 5)
    )
    with pytest.raises(DimensionMismatch):
        extract_features(make_event(raw="1,2"), fx)


def test_categorical_one_hot_then_numerics():
    fx = fit_categorical(
        LayerId.HYPERVISOR,
        numeric_fields=("cpu", "mem"),
        categorical_fields={"hv": ("KVM", "Xen")},
    )
    vec = extract_features(make_event(raw="hv=Xen cpu=0.5 mem=0.25"), fx)
    assert vec.tolist() == [0.0, 1.0, 0.5, 0.25]
    assert fx.dims == 4


def test_categorical_unknown_value_is_all_zero_block():
    fx = fit_categorical(
        LayerId.HYPERVISOR, numeric_fields=(), categorical_fields={"hv": ("KVM", "Xen")}
    )
    vec = extract_features(make_event(raw="hv=ESX"), fx)
    assert vec.tolist() == [0.0, 0.0]


def _labeled_blob(seed: int, n: int, dims: int = 6) -> list[Event]:
    rng = np.random.default_rng(seed)
    events = []
    for i in range(n):
        truth = i % 2
        center = 2.0 if truth else -2.0
        feats = rng.normal(center, 1.0, size=dims)
        events.append(
            Event(
                id=f"network-{i}",
                layer=LayerId.NETWORK,
                raw="",
                features=feats,
                truth=truth,
            )
        )
    return events


def test_logistic_matches_brute_force_descent():
    events = _labeled_blob(3, 80)
    cfg = TrainConfig(epochs=50, learning_rate=0.2, l2=1e-3, seed=11)
    scorer = train_baseline(events, cfg)

    # Oracle: independent re-derivation of the same schedule.
    x = np.stack([e.features for e in events])
    y = np.array([e.truth for e in events], dtype=np.float64)
    mu, sigma = x.mean(axis=0), x.std(axis=0)
    sigma[sigma == 0.0] = 1.0
    z = (x - mu) / sigma
    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, 0.01, size=z.shape[1])
    b = 0.0
    for _ in range(cfg.epochs):
        p = 1.0 / (1.0 + np.exp(-(z @ w + b)))
        w = w - cfg.learning_rate * (z.T @ (p - y) / len(y) + cfg.l2 * w)
        b = b - cfg.learning_rate * float((p - y).mean())
    w_raw = w / sigma
    b_raw = b - float((w * (mu / sigma)).sum())

    assert scorer.weights == pytest.approx(w_raw, abs=1e-9)
    assert scorer.bias == pytest.approx(b_raw, abs=1e-9)


def test_logistic_separates_blobs():
    train = _labeled_blob(5, 400)
    test = _labeled_blob(6, 200)
    scorer = train_baseline(train, TrainConfig())
    scored = score_stream(test, scorer)
    hits = sum(1 for se in scored if se.pred_label == se.event.truth)
    assert hits / len(scored) >= 0.95
    assert all(0.5 <= se.confidence <= 1.0 for se in scored)


def test_logistic_training_is_deterministic():
    events = _labeled_blob(9, 60)
    a = train_baseline(events, TrainConfig())
    b = train_baseline(events, TrainConfig())
    assert np.array_equal(a.weights, b.weights)
    assert a.bias == b.bias


def test_logistic_single_class_raises():
    events = [make_event(event_id=f"network-{i}", truth=1) for i in range(10)]
    with pytest.raises(SingleClassData):
        train_baseline(events, TrainConfig())


def test_logistic_tie_predicts_benign():
    scorer = Scorer(
        kind=ScorerKind.BASELINE_LOGISTIC, weights=np.zeros(4), bias=0.0
    )
    se = score(make_event(), scorer)
    # p is exactly 0.5: the tie stays benign at confidence 0.5.
    assert se.pred_label == 0
    assert se.confidence == 0.5


def test_replay_scorer_returns_stored_pair():
    scorer = make_replay_scorer(
        {"network-0": ReplayRow(pred_label=1, confidence=0.5807, truth=1)}
    )
    se = score(make_event(event_id="network-0"), scorer)
    assert se.pred_label == 1
    assert se.confidence == 0.5807


def test_replay_scorer_missing_id_raises():
    scorer = make_replay_scorer({})
    with pytest.raises(MissingReplayEntry):
        score(make_event(event_id="network-404"), scorer)


def test_replay_csv_round_trip(tmp_path):
    path = tmp_path / "replay.csv"
    path.write_text(
        "event_id,layer,pred_label,confidence,truth\n"
        "network-0,network,1,0.5807,1\n"
        "network-1,network,0,0.9990,\n"
    )
    table = load_replay_csv(str(path))
    assert table["network-0"] == ReplayRow(pred_label=1, confidence=0.5807, truth=1)
    assert table["network-1"].truth is None
    events = events_from_replay(table, LayerId.NETWORK)
    assert [e.id for e in events] == ["network-0", "network-1"]
    assert events[0].truth == 1


def test_replay_csv_rejects_missing_columns(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("event_id,confidence\nnetwork-0,0.5\n")
    with pytest.raises(ValueError):
        load_replay_csv(str(path))
