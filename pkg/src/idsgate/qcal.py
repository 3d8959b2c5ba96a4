"""Gate-1: confidence-threshold calibration via tabular Q-learning.

The gate itself is one comparison: an event whose model confidence is at
or above the layer threshold is accepted as KNOWN, everything else is
escalated.  The interesting part is picking the threshold.  A tabular
Q-learner watches a sliding window of recent scores, summarizes it into
a small discrete state, and tries candidate thresholds as actions.  The
reward favors keeping correct confident decisions local, punishes wrong
confident decisions (missed attacks hardest), charges a small fee per
escalation, and adds a band penalty whenever the window escalates more
than a budgeted fraction.  After training, a greedy rollout over the
stream picks the modal action as the learned threshold.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from .events import ScoredEvent

MEAN_BINS = 10
VAR_BINS = 5
UNC_BINS = 5


class EmptyWindow(ValueError):
    """Window statistics requested over zero events."""


class MissingTruth(ValueError):
    """Reward needs ground truth that the event does not carry."""


class UnlabeledStream(ValueError):
    """Calibration stream contains events without truth labels."""


class StreamTooShort(ValueError):
    """Calibration stream is shorter than one window."""


class Gate1Route(str, Enum):
    KNOWN = "known"
    UNCERTAIN = "uncertain"


@dataclass(frozen=True)
class QState:
    """Discretized window summary: (mean bin, variance bin, uncertain bin)."""

    mean_bin: int
    var_bin: int
    unc_bin: int

    def __post_init__(self) -> None:
        if not (0 <= self.mean_bin < MEAN_BINS):
            raise ValueError(f"mean_bin out of range: {self.mean_bin}")
        if not (0 <= self.var_bin < VAR_BINS):
            raise ValueError(f"var_bin out of range: {self.var_bin}")
        if not (0 <= self.unc_bin < UNC_BINS):
            raise ValueError(f"unc_bin out of range: {self.unc_bin}")


def default_action_set() -> tuple[float, ...]:
    """Candidate thresholds 0.50 to 0.95 inclusive, step 0.01."""
    return tuple(round(0.50 + 0.01 * i, 2) for i in range(46))


@dataclass(frozen=True)
class ActionSet:
    """Strictly increasing candidate thresholds in [0.5, 1.0)."""

    thresholds: tuple[float, ...] = field(default_factory=default_action_set)

    def __post_init__(self) -> None:
        if not self.thresholds:
            raise ValueError("action set must not be empty")
        for t in self.thresholds:
            if not (0.5 <= t < 1.0):
                raise ValueError(f"threshold {t} outside [0.5, 1.0)")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")

    def __len__(self) -> int:
        return len(self.thresholds)


@dataclass
class QTable:
    """Sparse tabular Q-function over (state, action index)."""

    n_actions: int
    alpha: float = 0.1
    gamma: float = 0.9
    table: dict[tuple[QState, int], float] = field(default_factory=dict)

    def get(self, state: QState, action: int) -> float:
        return self.table.get((state, action), 0.0)

    def best_value(self, state: QState) -> float:
        return max(self.get(state, a) for a in range(self.n_actions))

    def best_action(self, state: QState) -> int:
        # Ties resolve to the lowest action index.
        best, best_q = 0, self.get(state, 0)
        for a in range(1, self.n_actions):
            q = self.get(state, a)
            if q > best_q:
                best, best_q = a, q
        return best


@dataclass(frozen=True)
class RewardConfig:
    """Reward shape for threshold selection.

    A wrong confident attack call (missed attack) costs more than a wrong
    confident benign call; each escalation carries a small fixed cost;
    the band penalty applies to every event in a window whose escalated
    fraction exceeds ``band_max``.
    """

    r_correct_known: float = 1.0
    r_wrong_known_benign: float = -2.0
    r_wrong_known_attack: float = -3.0
    r_escalate: float = -0.2
    r_band_penalty: float = -1.0
    band_max: float = 0.25


def discretize(window: list[tuple[float, bool]]) -> QState:
    """Bin a window of (confidence, routed_uncertain) pairs into a QState.

    mean bin is floor(mean * 10) clamped to [0, 9]; variance bin is
    floor(variance * 50) clamped to [0, 4] (population variance);
    uncertain bin is floor(ratio * 5) clamped to [0, 4].

    Raises:
        EmptyWindow: the window holds no events.
    """
    if not window:
        raise EmptyWindow("cannot discretize an empty window")
    n = len(window)
    mean = sum(c for c, _ in window) / n
    var = sum((c - mean) ** 2 for c, _ in window) / n
    unc_ratio = sum(1 for _, u in window if u) / n
    return QState(
        mean_bin=min(MEAN_BINS - 1, max(0, int(mean * MEAN_BINS))),
        var_bin=min(VAR_BINS - 1, max(0, int(var * 50))),
        unc_bin=min(UNC_BINS - 1, max(0, int(unc_ratio * UNC_BINS))),
    )


def select_action(
    qt: QTable, state: QState, epsilon: float, rng: random.Random
) -> int:
    """Epsilon-greedy action choice; greedy ties go to the lowest index."""
    if rng.random() < epsilon:
        return rng.randrange(qt.n_actions)
    return qt.best_action(state)


def reward(
    se: ScoredEvent,
    routed_known: bool,
    window_unc_ratio: float,
    rc: RewardConfig,
) -> float:
    """Per-event reward for a routing decision made at some threshold.

    Raises:
        MissingTruth: the event has no ground-truth label.
    """
    truth = se.event.truth
    if truth is None:
        raise MissingTruth(f"event {se.event.id} has no truth label")
    if routed_known:
        if se.pred_label == truth:
            r = rc.r_correct_known
        elif truth == 1:
            r = rc.r_wrong_known_attack
        else:
            r = rc.r_wrong_known_benign
    else:
        r = rc.r_escalate
    if window_unc_ratio > rc.band_max:
        r += rc.r_band_penalty
    return r


def bellman_update(
    qt: QTable, state: QState, action: int, r: float, next_state: QState
) -> float:
    """One tabular value-iteration step.

    Q(s,a) <- Q(s,a) + alpha * (r + gamma * max_a' Q(s',a') - Q(s,a)),
    e.g. Q=0.5, alpha=0.1, r=1, gamma=0.9, max Q'=0.8 gives 0.622.
    Returns the updated value.
    """
    q = qt.get(state, action)
    updated = q + qt.alpha * (r + qt.gamma * qt.best_value(next_state) - q)
    qt.table[(state, action)] = updated
    return updated


def route_gate1(se: ScoredEvent, threshold: float) -> Gate1Route:
    """KNOWN when confidence meets or exceeds the threshold, else UNCERTAIN.

    The boundary is inclusive: confidence exactly at the threshold stays
    local.
    """
    return Gate1Route.KNOWN if se.confidence >= threshold else Gate1Route.UNCERTAIN


@dataclass(frozen=True)
class CalibConfig:
    episodes: int = 20
    window: int = 100
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.9
    epsilon_floor: float = 0.05
    alpha: float = 0.1
    gamma: float = 0.9
    rewards: RewardConfig = field(default_factory=RewardConfig)
    actions: ActionSet = field(default_factory=ActionSet)


@dataclass
class CalibrationResult:
    learned_threshold: float
    action_histogram: dict[float, int]
    episodes: int
    qtable: QTable | None = None


def _slice_step(
    sl: list[ScoredEvent], threshold: float, rc: RewardConfig
) -> tuple[list[tuple[float, bool]], float]:
    """Route one window slice at a fixed threshold.

    Returns the (confidence, uncertain) pairs observed and the mean
    per-event reward; the mean keeps reward scale independent of a short
    final slice.
    """
    flags = [route_gate1(se, threshold) is Gate1Route.UNCERTAIN for se in sl]
    unc_ratio = sum(flags) / len(flags)
    total = 0.0
    for se, unc in zip(sl, flags):
        total += reward(se, not unc, unc_ratio, rc)
    pairs = [(se.confidence, unc) for se, unc in zip(sl, flags)]
    return pairs, total / len(sl)


def calibrate(
    stream: list[ScoredEvent], cfg: CalibConfig, seed: int
) -> CalibrationResult:
    """Learn a per-layer Gate-1 threshold from a labeled scored stream.

    Each episode walks the stream in window-sized slices, holding one
    action fixed per slice: summarize the previous slice's outcomes into
    a state, pick a threshold epsilon-greedily, route the slice, score
    it, and apply the value update with the routed slice as the next
    state.  Exploration decays per episode down to a floor.  A final
    greedy rollout re-walks the stream; the modal action becomes the
    learned threshold, ties resolving to the lower threshold.

    Raises:
        UnlabeledStream: any event lacks a truth label.
        StreamTooShort: stream shorter than one window.
    """
    if any(se.event.truth is None for se in stream):
        raise UnlabeledStream("calibration stream must be fully labeled")
    if len(stream) < cfg.window:
        raise StreamTooShort(
            f"stream of {len(stream)} events is shorter than window {cfg.window}"
        )
    rng = random.Random(seed)
    qt = QTable(n_actions=len(cfg.actions), alpha=cfg.alpha, gamma=cfg.gamma)
    thresholds = cfg.actions.thresholds
    slices = [stream[i : i + cfg.window] for i in range(0, len(stream), cfg.window)]

    def bootstrap() -> list[tuple[float, bool]]:
        # Before anything is routed the first window carries no
        # escalations; only its confidences inform the starting state.
        return [(se.confidence, False) for se in slices[0]]

    for episode in range(cfg.episodes):
        epsilon = max(cfg.epsilon_floor, cfg.epsilon_start * cfg.epsilon_decay**episode)
        prev = bootstrap()
        for sl in slices:
            state = discretize(prev)
            action = select_action(qt, state, epsilon, rng)
            pairs, r = _slice_step(sl, thresholds[action], cfg.rewards)
            bellman_update(qt, state, action, r, discretize(pairs))
            prev = pairs

    histogram: dict[float, int] = {}
    prev = bootstrap()
    for sl in slices:
        state = discretize(prev)
        action = qt.best_action(state)
        tau = thresholds[action]
        histogram[tau] = histogram.get(tau, 0) + 1
        prev, _ = _slice_step(sl, tau, cfg.rewards)

    # Modal action wins; ties resolve to the lower threshold.
    learned = min(
        histogram, key=lambda t: (-histogram[t], t)
    )
    return CalibrationResult(
        learned_threshold=learned,
        action_histogram=histogram,
        episodes=cfg.episodes,
        qtable=qt,
    )
