"""End-to-end assembly: corpora, scorers, calibrations, runs, artifacts.

This is the layer between the CLI and the pipeline primitives.  It
knows how to produce events for each layer (generate or load), fit the
layer's extractor and base model on the training split, calibrate the
gates, run the modes, and write every artifact with run id and mode in
the file name.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os

from .config import ConfigError, ExperimentConfig
from .corpus import (
    HostGenConfig,
    HypGenConfig,
    NetGenConfig,
    gen_hostlogs,
    gen_hypervisor,
    gen_network,
    load_host_jsonl,
    load_hypervisor_csv,
    load_network_csv,
    split_train_test,
    write_host_jsonl,
    write_hypervisor_csv,
    write_network_csv,
)
from .events import Event, LayerId, ScoredEvent
from .llm import EchoLlmClient, HttpLlmClient, MockLlmClient
from .memory import MemoryStore, load_store
from .outputs import (
    OutputPaths,
    RunSummary,
    output_paths,
    write_confidence_csv,
    write_histogram_csv,
    write_jsonl,
    write_review_jsonl,
    write_run_summary,
)
from .pipeline import (
    Comparison,
    LAYER_ORDER,
    Mode,
    ModeRun,
    calibrate_gate1,
    calibrate_llm_for_layer,
    compare_modes,
    run_mode,
)
from .qcal import CalibrationResult
from .scoring import (
    Scorer,
    TrainConfig,
    events_from_replay,
    extract_features,
    fit_tfidf,
    load_replay_csv,
    make_replay_scorer,
    score_stream,
    train_baseline,
)

logger = logging.getLogger(__name__)

NETWORK_FILE = "network.csv"
HOST_FILE = "host.jsonl"
HYPERVISOR_FILE = "hypervisor.csv"


@dataclasses.dataclass
class LayerBundle:
    """One layer, ready to run: split corpus, fitted scorer, scores."""

    layer: LayerId
    events: list[Event]
    train: list[Event]
    test: list[Event]
    eval_events: list[Event]
    scorer: Scorer
    train_scored: list[ScoredEvent]
    eval_scored: list[ScoredEvent]


def generate_events(layer: LayerId, xcfg: ExperimentConfig) -> list[Event]:
    seed = xcfg.pipeline.seed
    if layer is LayerId.NETWORK:
        return gen_network(
            NetGenConfig(
                count=xcfg.net_count,
                attack_fraction=xcfg.net_attack_fraction,
                separation=xcfg.net_separation,
                seed=seed,
            )
        )
    if layer is LayerId.HOST:
        return gen_hostlogs(
            HostGenConfig(
                count=xcfg.host_count,
                attack_fraction=xcfg.host_attack_fraction,
                ambiguity=xcfg.host_ambiguity,
                seed=seed + 1,
            )
        )
    return gen_hypervisor(HypGenConfig(seed=seed + 2))


def load_events(layer: LayerId, data_dir: str) -> list[Event]:
    if layer is LayerId.NETWORK:
        return load_network_csv(os.path.join(data_dir, NETWORK_FILE))
    if layer is LayerId.HOST:
        return load_host_jsonl(os.path.join(data_dir, HOST_FILE))
    return load_hypervisor_csv(os.path.join(data_dir, HYPERVISOR_FILE))


def get_events(layer: LayerId, xcfg: ExperimentConfig) -> list[Event]:
    spec = xcfg.scorers[layer]
    if spec.startswith("replay:"):
        table = load_replay_csv(spec.removeprefix("replay:"))
        return events_from_replay(table, layer)
    if xcfg.data_dir:
        return load_events(layer, xcfg.data_dir)
    return generate_events(layer, xcfg)


def prepare_layer(
    layer: LayerId, events: list[Event], xcfg: ExperimentConfig
) -> LayerBundle:
    """Split, fit the text extractor if needed, train/score the base model.

    tf-idf for the host layer is fitted on the training split only, then
    applied to every event, so evaluation text never leaks into the fit.
    """
    cfg = xcfg.pipeline
    train, test = split_train_test(events, cfg.train_ratio, cfg.seed)
    if layer is LayerId.HOST and not xcfg.scorers[layer].startswith("replay:"):
        fx = fit_tfidf([e.raw for e in train])
        train = [
            dataclasses.replace(e, features=extract_features(e, fx)) for e in train
        ]
        test = [dataclasses.replace(e, features=extract_features(e, fx)) for e in test]
    spec = xcfg.scorers[layer]
    if spec.startswith("replay:"):
        scorer = make_replay_scorer(load_replay_csv(spec.removeprefix("replay:")))
    elif spec == "baseline":
        scorer = train_baseline(train, TrainConfig(seed=cfg.seed))
    else:
        raise ConfigError(f"unknown scorer spec for {layer.value}: {spec!r}")
    eval_events = test[: cfg.eval_count]
    return LayerBundle(
        layer=layer,
        events=events,
        train=train,
        test=test,
        eval_events=eval_events,
        scorer=scorer,
        train_scored=score_stream(train, scorer),
        eval_scored=score_stream(eval_events, scorer),
    )


def prepare_bundles(xcfg: ExperimentConfig) -> dict[LayerId, LayerBundle]:
    return {
        layer: prepare_layer(layer, get_events(layer, xcfg), xcfg)
        for layer in LAYER_ORDER
        if layer in xcfg.layers
    }


def truth_maps(
    bundles: dict[LayerId, LayerBundle]
) -> tuple[dict[str, int], dict[str, str]]:
    truths: dict[str, int] = {}
    attack_types: dict[str, str] = {}
    for bundle in bundles.values():
        for e in bundle.events:
            if e.truth is not None:
                truths[e.id] = e.truth
            if e.truth_class:
                attack_types[e.id] = e.truth_class
    return truths, attack_types


def client_factory(xcfg: ExperimentConfig, bundles: dict[LayerId, LayerBundle]):
    """Build a fresh LLM client per (layer, mode) run.

    Specs: ``echo[:confidence]`` answers with ground truth (evaluation
    oracle), ``table:<path>`` replays canned responses keyed by prompt
    hash, ``http`` talks to the configured endpoint.
    """
    spec = xcfg.llm_spec
    if spec.startswith("echo"):
        _, _, conf = spec.partition(":")
        confidence = float(conf) if conf else 0.9
        truths, attack_types = truth_maps(bundles)

        def make(layer: LayerId, mode: Mode):
            return EchoLlmClient(truths, confidence, attack_types)

        return make
    if spec.startswith("table:"):
        path = spec.removeprefix("table:")

        def make(layer: LayerId, mode: Mode):
            return MockLlmClient.from_jsonl(path)

        return make
    if spec == "http":

        def make(layer: LayerId, mode: Mode):
            return HttpLlmClient(
                xcfg.llm_url,
                xcfg.llm_model,
                timeout=xcfg.llm_timeout,
                retries=xcfg.llm_retries,
            )

        return make
    raise ConfigError(f"unknown llm spec: {spec!r}")


def store_factory(xcfg: ExperimentConfig):
    dims = xcfg.pipeline.embedding.dims

    def make(layer: LayerId, mode: Mode) -> MemoryStore:
        if xcfg.memory_dir:
            os.makedirs(xcfg.memory_dir, exist_ok=True)
            path = os.path.join(
                xcfg.memory_dir, f"memory_{layer.value}_{mode.value}.jsonl"
            )
            return load_store(path, dims)
        return MemoryStore(dims=dims)

    return make


def gate1_calibrations(
    bundles: dict[LayerId, LayerBundle], xcfg: ExperimentConfig
) -> dict[LayerId, CalibrationResult]:
    return {
        layer: calibrate_gate1(bundle.train_scored, xcfg.pipeline)
        for layer, bundle in bundles.items()
    }


def run_id_of(xcfg: ExperimentConfig) -> str:
    return f"run{xcfg.pipeline.seed}"


def write_mode_artifacts(
    xcfg: ExperimentConfig, mode_run: ModeRun, summary: RunSummary
) -> OutputPaths:
    os.makedirs(xcfg.out_dir, exist_ok=True)
    paths = output_paths(xcfg.out_dir, mode_run.mode.value, run_id_of(xcfg))
    routed = []
    audits = []
    reviews = []
    for layer in LAYER_ORDER:
        lr = mode_run.layer_runs.get(layer)
        if lr is None:
            continue
        routed.extend(lr.routed)
        audits.extend(lr.audits)
        reviews.extend(lr.reviews)
    write_confidence_csv(paths.confidence, routed)
    write_jsonl(paths.audit, audits)
    write_review_jsonl(paths.review, reviews)
    write_run_summary(paths.summary, summary)
    return paths


def do_gen(xcfg: ExperimentConfig) -> dict[str, str]:
    """Generate the selected corpora and write them under the out dir."""
    os.makedirs(xcfg.out_dir, exist_ok=True)
    written: dict[str, str] = {}
    for layer in xcfg.layers:
        events = generate_events(layer, xcfg)
        if layer is LayerId.NETWORK:
            path = os.path.join(xcfg.out_dir, NETWORK_FILE)
            write_network_csv(events, path)
        elif layer is LayerId.HOST:
            path = os.path.join(xcfg.out_dir, HOST_FILE)
            write_host_jsonl(events, path)
        else:
            path = os.path.join(xcfg.out_dir, HYPERVISOR_FILE)
            write_hypervisor_csv(events, path)
        written[layer.value] = path
    return written


def do_calibrate(xcfg: ExperimentConfig) -> str:
    """Calibrate Gate-1 per layer and persist the learned thresholds."""
    bundles = prepare_bundles(xcfg)
    calibs = gate1_calibrations(bundles, xcfg)
    os.makedirs(xcfg.out_dir, exist_ok=True)
    path = os.path.join(xcfg.out_dir, f"calibration_{run_id_of(xcfg)}.json")
    payload = {
        "seed": xcfg.pipeline.seed,
        "episodes": xcfg.pipeline.calib.episodes,
        "layers": {
            layer.value: {
                "learned_threshold": calibs[layer].learned_threshold,
                "action_histogram": {
                    f"{t}": n for t, n in sorted(calibs[layer].action_histogram.items())
                },
            }
            for layer in sorted(calibs, key=lambda l: l.value)
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    return path


def load_calibration(path: str) -> dict[LayerId, CalibrationResult]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    out: dict[LayerId, CalibrationResult] = {}
    for name, entry in payload["layers"].items():
        out[LayerId(name)] = CalibrationResult(
            learned_threshold=entry["learned_threshold"],
            action_histogram={
                float(t): n for t, n in entry.get("action_histogram", {}).items()
            },
            episodes=payload.get("episodes", 0),
            qtable=None,
        )
    return out


def do_calibrate_llm(xcfg: ExperimentConfig) -> str:
    """Calibrate per-layer LLM thresholds on the training split."""
    bundles = prepare_bundles(xcfg)
    make_client = client_factory(xcfg, bundles)
    os.makedirs(xcfg.out_dir, exist_ok=True)
    results = {}
    for layer, bundle in bundles.items():
        cal = calibrate_llm_for_layer(
            layer, bundle.train_scored, xcfg.pipeline, make_client(layer, Mode.ADAPTIVE)
        )
        results[layer.value] = {
            "threshold": cal.threshold,
            "feasible": cal.feasible,
            "precision": cal.precision,
            "recall": cal.recall,
        }
    path = os.path.join(xcfg.out_dir, f"llm_thresholds_{run_id_of(xcfg)}.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"p_min": xcfg.pipeline.llm_thresholds.p_min, "layers": results},
            fh,
            indent=2,
        )
        fh.write("\n")
    return path


def do_run(
    xcfg: ExperimentConfig, calibration_path: str | None = None
) -> tuple[ModeRun, RunSummary, OutputPaths]:
    """One full run in the configured mode; writes all artifacts."""
    bundles = prepare_bundles(xcfg)
    cfg = xcfg.pipeline
    if cfg.mode is Mode.ADAPTIVE:
        if calibration_path:
            calibs = load_calibration(calibration_path)
        else:
            calibs = gate1_calibrations(bundles, xcfg)
    else:
        calibs = {}
    scored = {layer: bundle.eval_scored for layer, bundle in bundles.items()}
    mode_run, summary = run_mode(
        scored,
        calibs,
        cfg.mode,
        cfg,
        store_factory(xcfg),
        client_factory(xcfg, bundles),
    )
    paths = write_mode_artifacts(xcfg, mode_run, summary)
    return mode_run, summary, paths


def do_compare(
    xcfg: ExperimentConfig, calibration_path: str | None = None
) -> tuple[Comparison, dict[str, str]]:
    """Both modes on shared scores; writes artifacts plus the comparison."""
    bundles = prepare_bundles(xcfg)
    if calibration_path:
        calibs = load_calibration(calibration_path)
    else:
        calibs = gate1_calibrations(bundles, xcfg)
    scored = {layer: bundle.eval_scored for layer, bundle in bundles.items()}
    comp = compare_modes(
        scored,
        calibs,
        xcfg.pipeline,
        store_factory(xcfg),
        client_factory(xcfg, bundles),
    )
    files: dict[str, str] = {}
    static_paths = write_mode_artifacts(xcfg, comp.static, comp.static_summary)
    adaptive_paths = write_mode_artifacts(xcfg, comp.adaptive, comp.adaptive_summary)
    files["static_summary"] = static_paths.summary
    files["adaptive_summary"] = adaptive_paths.summary

    run_id = run_id_of(xcfg)
    compare_path = os.path.join(xcfg.out_dir, f"compare_{run_id}.json")
    payload = {
        "cost": comp.cost.to_dict(),
        "learned_thresholds": {
            layer.value: calibs[layer].learned_threshold
            for layer in sorted(calibs, key=lambda l: l.value)
            if layer in scored
        },
        "static": _mode_digest(comp.static),
        "adaptive": _mode_digest(comp.adaptive),
    }
    with open(compare_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    files["compare"] = compare_path

    table_path = os.path.join(xcfg.out_dir, f"compare_table_{run_id}.csv")
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(
            "layer,mode,total,known,uncertain,memory_matched,llm_promoted,bucket,threshold\n"
        )
        for mode_run in (comp.static, comp.adaptive):
            for layer in LAYER_ORDER:
                lr = mode_run.layer_runs.get(layer)
                if lr is None:
                    continue
                s = lr.summary
                fh.write(
                    f"{s.layer},{mode_run.mode.value},{s.total},{s.known},"
                    f"{s.uncertain},{s.memory_matched},{s.llm_promoted},{s.bucket},"
                    f"{s.learned_threshold}\n"
                )
    files["table"] = table_path
    return comp, files


def _mode_digest(mode_run: ModeRun) -> dict:
    metrics = mode_run.overall_metrics()
    return {
        "uncertain": mode_run.total_uncertain,
        "llm_calls": mode_run.total_llm_calls,
        "metrics": metrics.to_dict() if metrics else None,
    }


def do_report(xcfg: ExperimentConfig) -> list[str]:
    """Re-render histogram CSVs from stored confidence files."""
    import csv as _csv

    run_id = run_id_of(xcfg)
    written: list[str] = []
    for mode in (Mode.STATIC, Mode.ADAPTIVE):
        src = output_paths(xcfg.out_dir, mode.value, run_id).confidence
        if not os.path.exists(src):
            continue
        rows: list[tuple[str, float]] = []
        with open(src, newline="", encoding="utf-8") as fh:
            for row in _csv.DictReader(fh):
                rows.append((row["layer"], float(row["confidence"])))
        dest = os.path.join(xcfg.out_dir, f"histogram_{mode.value}_{run_id}.csv")
        write_histogram_csv(dest, rows)
        written.append(dest)
    return written
