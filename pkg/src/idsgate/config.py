"""Configuration: a flat key=value file, overridden by CLI flags.

Every tunable default in the system is reachable from here.  The file
format is one ``key = value`` per line, ``#`` comments, blank lines
ignored.  Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .events import LayerId
from .llm import DEFAULT_LLM_THRESHOLDS, FusionConfig, LlmThresholds
from .memory import EmbeddingConfig, MatchConfig
from .pipeline import Mode, PipelineConfig
from .qcal import ActionSet, CalibConfig, RewardConfig


class ConfigError(ValueError):
    """Bad config file contents or values."""


@dataclass
class ExperimentConfig:
    """Pipeline config plus corpus, scorer, and LLM-client selection."""

    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    layers: tuple[LayerId, ...] = (LayerId.NETWORK, LayerId.HOST, LayerId.HYPERVISOR)
    # "baseline" or "replay:<csv path>" per layer
    scorers: dict[LayerId, str] = field(
        default_factory=lambda: {layer: "baseline" for layer in LayerId}
    )
    # LLM client: "echo[:confidence]", "table:<jsonl path>", or "http"
    llm_spec: str = "echo:0.9"
    llm_url: str = "http://localhost:11434"
    llm_model: str = "llama3"
    llm_timeout: float = 30.0
    llm_retries: int = 2
    out_dir: str = "out"
    data_dir: str | None = None
    memory_dir: str | None = None
    # generator knobs
    net_count: int = 25000
    net_attack_fraction: float = 0.25
    net_separation: float = 3.0
    host_count: int = 25000
    host_attack_fraction: float = 0.35
    host_ambiguity: float = 0.5


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; later keys override earlier ones."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out


def _as_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


_LAYER_KEYS = {
    "network": LayerId.NETWORK,
    "host": LayerId.HOST,
    "hypervisor": LayerId.HYPERVISOR,
}


def build_experiment_config(kv: dict[str, str]) -> ExperimentConfig:
    """Turn a flat key/value mapping into typed configuration.

    Raises:
        ConfigError: unknown key or unparseable value.
    """
    xcfg = ExperimentConfig()
    pipe = xcfg.pipeline
    calib = pipe.calib
    rewards = calib.rewards
    match = pipe.match
    llm_tau = dict(pipe.llm_thresholds.tau)
    fusion_tau: dict[LayerId, float] = dict(pipe.fusion.fusion_tau)
    fusion_tau_set: set[LayerId] = set()
    action_min, action_max, action_step = 0.50, 0.95, 0.01
    embed_dims = pipe.embedding.dims
    scalar: dict[str, object] = {}

    def fnum(v: str) -> float:
        try:
            return float(v)
        except ValueError as exc:
            raise ConfigError(f"not a number: {v!r}") from exc

    def inum(v: str) -> int:
        try:
            return int(v)
        except ValueError as exc:
            raise ConfigError(f"not an integer: {v!r}") from exc

    for key, value in kv.items():
        try:
            if key == "mode":
                scalar["mode"] = Mode(value.lower())
            elif key == "static_threshold":
                scalar["static_threshold"] = fnum(value)
            elif key == "eval_count":
                scalar["eval_count"] = inum(value)
            elif key == "train_ratio":
                scalar["train_ratio"] = fnum(value)
            elif key == "seed":
                scalar["seed"] = inum(value)
            elif key == "c_event":
                scalar["c_event"] = fnum(value)
            elif key == "llm_parallelism":
                scalar["llm_parallelism"] = inum(value)
            elif key == "wall_clock":
                scalar["wall_clock"] = _as_bool(value)
            elif key == "episodes":
                calib = replace(calib, episodes=inum(value))
            elif key == "window":
                calib = replace(calib, window=inum(value))
            elif key == "epsilon_start":
                calib = replace(calib, epsilon_start=fnum(value))
            elif key == "epsilon_decay":
                calib = replace(calib, epsilon_decay=fnum(value))
            elif key == "epsilon_floor":
                calib = replace(calib, epsilon_floor=fnum(value))
            elif key == "alpha":
                calib = replace(calib, alpha=fnum(value))
            elif key == "gamma":
                calib = replace(calib, gamma=fnum(value))
            elif key == "r_correct_known":
                rewards = replace(rewards, r_correct_known=fnum(value))
            elif key == "r_wrong_known_benign":
                rewards = replace(rewards, r_wrong_known_benign=fnum(value))
            elif key == "r_wrong_known_attack":
                rewards = replace(rewards, r_wrong_known_attack=fnum(value))
            elif key == "r_escalate":
                rewards = replace(rewards, r_escalate=fnum(value))
            elif key == "r_band_penalty":
                rewards = replace(rewards, r_band_penalty=fnum(value))
            elif key == "band_max":
                rewards = replace(rewards, band_max=fnum(value))
            elif key == "action_min":
                action_min = fnum(value)
            elif key == "action_max":
                action_max = fnum(value)
            elif key == "action_step":
                action_step = fnum(value)
            elif key == "embed_dims":
                embed_dims = inum(value)
            elif key == "match_k":
                match = replace(match, k=inum(value))
            elif key == "exact_radius":
                match = replace(match, exact_radius=fnum(value))
            elif key == "near_radius":
                match = replace(match, near_radius=fnum(value))
            elif key == "support_radius":
                match = replace(match, support_radius=fnum(value))
            elif key == "min_support":
                match = replace(match, min_support=inum(value))
            elif key == "min_meta":
                match = replace(match, min_meta=fnum(value))
            elif key.startswith("llm_tau_"):
                layer = _layer_key(key.removeprefix("llm_tau_"))
                llm_tau[layer] = fnum(value)
            elif key == "p_min":
                scalar["p_min"] = fnum(value)
            elif key == "w_model":
                scalar["w_model"] = fnum(value)
            elif key == "w_llm":
                scalar["w_llm"] = fnum(value)
            elif key.startswith("fusion_tau_"):
                layer = _layer_key(key.removeprefix("fusion_tau_"))
                fusion_tau[layer] = fnum(value)
                fusion_tau_set.add(layer)
            elif key.startswith("scorer_"):
                layer = _layer_key(key.removeprefix("scorer_"))
                xcfg.scorers[layer] = value
            elif key == "llm":
                xcfg.llm_spec = value
            elif key == "llm_url":
                xcfg.llm_url = value
            elif key == "llm_model":
                xcfg.llm_model = value
            elif key == "llm_timeout":
                xcfg.llm_timeout = fnum(value)
            elif key == "llm_retries":
                xcfg.llm_retries = inum(value)
            elif key == "out_dir":
                xcfg.out_dir = value
            elif key == "data_dir":
                xcfg.data_dir = value
            elif key == "memory_dir":
                xcfg.memory_dir = value
            elif key == "layers":
                xcfg.layers = tuple(
                    _layer_key(part.strip()) for part in value.split(",") if part.strip()
                )
            elif key == "net_count":
                xcfg.net_count = inum(value)
            elif key == "net_attack_fraction":
                xcfg.net_attack_fraction = fnum(value)
            elif key == "net_separation":
                xcfg.net_separation = fnum(value)
            elif key == "host_count":
                xcfg.host_count = inum(value)
            elif key == "host_attack_fraction":
                xcfg.host_attack_fraction = fnum(value)
            elif key == "host_ambiguity":
                xcfg.host_ambiguity = fnum(value)
            else:
                raise ConfigError(f"unknown config key: {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc

    n_actions = int(round((action_max - action_min) / action_step)) + 1
    actions = ActionSet(
        thresholds=tuple(round(action_min + i * action_step, 6) for i in range(n_actions))
    )
    calib = replace(calib, rewards=rewards, actions=actions)
    thresholds = LlmThresholds(
        tau=llm_tau, p_min=float(scalar.get("p_min", pipe.llm_thresholds.p_min))
    )
    # fusion thresholds follow the LLM thresholds unless set explicitly
    for layer in LayerId:
        if layer not in fusion_tau_set:
            fusion_tau[layer] = llm_tau[layer]
    fusion = FusionConfig(
        w_model=float(scalar.get("w_model", pipe.fusion.w_model)),
        w_llm=float(scalar.get("w_llm", pipe.fusion.w_llm)),
        fusion_tau=fusion_tau,
    )
    xcfg.pipeline = PipelineConfig(
        mode=scalar.get("mode", pipe.mode),
        static_threshold=scalar.get("static_threshold", pipe.static_threshold),
        eval_count=scalar.get("eval_count", pipe.eval_count),
        train_ratio=scalar.get("train_ratio", pipe.train_ratio),
        seed=scalar.get("seed", pipe.seed),
        c_event=scalar.get("c_event", pipe.c_event),
        llm_parallelism=scalar.get("llm_parallelism", pipe.llm_parallelism),
        wall_clock=scalar.get("wall_clock", pipe.wall_clock),
        calib=calib,
        match=match,
        embedding=EmbeddingConfig(dims=embed_dims),
        llm_thresholds=thresholds,
        fusion=fusion,
    )
    return xcfg


def _layer_key(name: str) -> LayerId:
    try:
        return _LAYER_KEYS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown layer: {name!r}") from None


def load_experiment_config(
    path: str | None, overrides: dict[str, str] | None = None
) -> ExperimentConfig:
    """File config (if any) with override keys applied on top."""
    kv = read_config_file(path) if path else {}
    if overrides:
        kv.update(overrides)
    return build_experiment_config(kv)
