"""Synthetic corpora for the three layers, plus loaders and the split.

The hypervisor generator is count-exact: the configured per-class totals
are produced verbatim, then shuffled.  The network and host generators
are shape-oriented: a separation knob controls how cleanly a base model
can tell the populations apart, which in turn shapes the confidence
distribution the gates see.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field

import numpy as np

from .events import Event, LayerId, make_event_id
from .scoring import (
    FeatureExtractor,
    FeatureMode,
    extract_features,
    fit_categorical,
    parse_kv_record,
)

HYP_TYPES = ("VMware ESXi", "KVM", "Xen", "Hyper-V")

HYP_NUMERIC_FIELDS = (
    "cpu_util",
    "mem_util",
    "disk_io_mbps",
    "net_io_mbps",
    "priv_call_rate",
    "hypercall_rate",
    "snapshot_ops",
    "snapshot_size_mb",
    "active_vms",
    "inter_vm_traffic_mbps",
    "vcpu_steal_pct",
    "page_fault_rate",
    "io_wait_pct",
    "mgmt_api_calls",
    "console_sessions",
    "migration_ops",
    "device_attach_ops",
    "timing_jitter_ms",
    "entropy_score",
    "failed_auth_count",
    "kernel_module_loads",
    "uptime_hours",
)

# 24 columns: class label, hypervisor type, 22 behavior fields.
HYP_COLUMNS = ("event_class", "hv") + HYP_NUMERIC_FIELDS

HYP_NORMAL_CLASS = "normal"

DEFAULT_HYP_COUNTS = {
    "normal": 12500,
    "vm_lateral_movement": 2541,
    "vm_escape": 2501,
    "snapshot_abuse": 2500,
    "hypervisor_dos": 2488,
    "hyper_jacking": 2470,
}

# Baseline (normal-operation) distribution parameters.  Gaussian fields
# are (mean, sd); Poisson fields are rates.  Attack classes override a
# handful of signature fields with overlapping shifts, so no single
# field separates the classes cleanly.
_HYP_GAUSS = {
    "cpu_util": (0.35, 0.15),
    "mem_util": (0.45, 0.15),
    "disk_io_mbps": (80.0, 40.0),
    "net_io_mbps": (60.0, 30.0),
    "priv_call_rate": (120.0, 60.0),
    "hypercall_rate": (200.0, 80.0),
    "snapshot_size_mb": (256.0, 128.0),
    "inter_vm_traffic_mbps": (40.0, 20.0),
    "vcpu_steal_pct": (2.0, 1.5),
    "page_fault_rate": (900.0, 400.0),
    "io_wait_pct": (5.0, 3.0),
    "timing_jitter_ms": (1.2, 0.6),
    "entropy_score": (3.0, 0.8),
    "uptime_hours": (400.0, 300.0),
}

_HYP_POISSON = {
    "snapshot_ops": 1.0,
    "active_vms": 12.0,
    "mgmt_api_calls": 4.0,
    "console_sessions": 1.0,
    "migration_ops": 0.5,
    "device_attach_ops": 0.5,
    "failed_auth_count": 0.3,
    "kernel_module_loads": 0.2,
}

_HYP_CLASS_GAUSS = {
    "vm_lateral_movement": {
        "inter_vm_traffic_mbps": (130.0, 45.0),
        "net_io_mbps": (140.0, 50.0),
    },
    "vm_escape": {
        "priv_call_rate": (420.0, 140.0),
        "hypercall_rate": (520.0, 160.0),
        "page_fault_rate": (1800.0, 600.0),
    },
    "snapshot_abuse": {
        "snapshot_size_mb": (900.0, 300.0),
        "disk_io_mbps": (200.0, 80.0),
    },
    "hypervisor_dos": {
        "cpu_util": (0.85, 0.10),
        "io_wait_pct": (28.0, 10.0),
        "vcpu_steal_pct": (14.0, 6.0),
        "timing_jitter_ms": (6.0, 2.5),
        "page_fault_rate": (2400.0, 800.0),
    },
    "hyper_jacking": {
        "entropy_score": (5.2, 1.0),
    },
}

_HYP_CLASS_POISSON = {
    "vm_lateral_movement": {"console_sessions": 3.0, "failed_auth_count": 2.0},
    "vm_escape": {"kernel_module_loads": 4.0},
    "snapshot_abuse": {"snapshot_ops": 9.0, "mgmt_api_calls": 8.0},
    "hypervisor_dos": {},
    "hyper_jacking": {
        "mgmt_api_calls": 18.0,
        "failed_auth_count": 6.0,
        "device_attach_ops": 3.0,
        "kernel_module_loads": 2.0,
    },
}

_FRACTION_FIELDS = {"cpu_util", "mem_util"}


class CountSumMismatch(ValueError):
    """Per-class counts do not add up to the configured total."""


class InvalidSplitRatio(ValueError):
    """Train fraction must lie strictly between 0 and 1."""


@dataclass(frozen=True)
class HypGenConfig:
    total: int = 25000
    class_counts: dict[str, int] = field(
        default_factory=lambda: dict(DEFAULT_HYP_COUNTS)
    )
    seed: int = 0

    def __post_init__(self) -> None:
        if sum(self.class_counts.values()) != self.total:
            raise CountSumMismatch(
                f"class counts sum to {sum(self.class_counts.values())}, "
                f"config says {self.total}"
            )


@dataclass(frozen=True)
class NetGenConfig:
    count: int = 5000
    n_features: int = 40
    attack_fraction: float = 0.25
    separation: float = 3.0
    seed: int = 0


@dataclass(frozen=True)
class HostGenConfig:
    count: int = 5000
    attack_fraction: float = 0.35
    ambiguity: float = 0.5
    seed: int = 0


def _kv_token(value: str) -> str:
    # Raw records are space-separated key=value pairs, so values must
    # not contain spaces ("VMware ESXi" -> "VMware_ESXi").
    return value.replace(" ", "_")


def hypervisor_extractor() -> FeatureExtractor:
    """One-hot hypervisor type plus the 22 numeric behavior fields."""
    return fit_categorical(
        LayerId.HYPERVISOR,
        HYP_NUMERIC_FIELDS,
        {"hv": tuple(_kv_token(t) for t in HYP_TYPES)},
    )


def _hyp_row(rng: np.random.Generator, cls: str) -> dict[str, str]:
    gauss = dict(_HYP_GAUSS)
    gauss.update(_HYP_CLASS_GAUSS.get(cls, {}))
    poisson = dict(_HYP_POISSON)
    poisson.update(_HYP_CLASS_POISSON.get(cls, {}))
    row: dict[str, str] = {
        "event_class": cls,
        "hv": HYP_TYPES[int(rng.integers(len(HYP_TYPES)))],
    }
    for name in HYP_NUMERIC_FIELDS:
        if name in poisson:
            row[name] = str(int(rng.poisson(poisson[name])))
        else:
            mean, sd = gauss[name]
            value = float(rng.normal(mean, sd))
            if name in _FRACTION_FIELDS:
                value = min(max(value, 0.0), 1.0)
            else:
                value = max(value, 0.0)
            row[name] = f"{value:.4f}"
    return row


def _hyp_event(row: dict[str, str], ordinal: int, fx: FeatureExtractor) -> Event:
    cls = row["event_class"]
    raw = " ".join(f"{k}={_kv_token(row[k])}" for k in HYP_COLUMNS[1:])
    eid = make_event_id(LayerId.HYPERVISOR, ordinal)
    features = extract_features(
        Event(eid, LayerId.HYPERVISOR, raw, np.zeros(1)), fx
    )
    return Event(
        id=eid,
        layer=LayerId.HYPERVISOR,
        raw=raw,
        features=features,
        truth=0 if cls == HYP_NORMAL_CLASS else 1,
        truth_class=cls,
    )


def gen_hypervisor(cfg: HypGenConfig) -> list[Event]:
    """Generate the hypervisor corpus with exact per-class counts.

    Rows are drawn class by class, shuffled once, and numbered; the same
    config always yields the same events.
    """
    rng = np.random.default_rng(cfg.seed)
    rows: list[dict[str, str]] = []
    for cls in sorted(cfg.class_counts):
        for _ in range(cfg.class_counts[cls]):
            rows.append(_hyp_row(rng, cls))
    order = rng.permutation(len(rows))
    fx = hypervisor_extractor()
    return [_hyp_event(rows[i], ordinal, fx) for ordinal, i in enumerate(order)]


def write_hypervisor_csv(events: list[Event], path: str) -> None:
    """Write the 24-column dataset (labels included, ids positional)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HYP_COLUMNS)
        for e in events:
            fields = parse_kv_record(e.raw)
            row = [e.truth_class]
            for c in HYP_COLUMNS[1:]:
                value = fields.get(c, "")
                row.append(value.replace("_", " ") if c == "hv" else value)
            writer.writerow(row)


def load_hypervisor_csv(path: str) -> list[Event]:
    """Rebuild events from a 24-column dataset file; ids are positional."""
    fx = hypervisor_extractor()
    events: list[Event] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for ordinal, row in enumerate(reader):
            row = dict(row)
            row["hv"] = row.get("hv", "")
            events.append(_hyp_event(row, ordinal, fx))
    return events


NET_ATTACK_TYPES = ("port_scan", "brute_force", "dos", "infiltration")


def gen_network(cfg: NetGenConfig) -> list[Event]:
    """Two numeric flow populations with configurable mean separation.

    Benign flows are standard normal per feature; attack flows share the
    covariance but sit ``separation`` away along a fixed random
    direction.  High separation makes a trained model confident, low
    separation leaves diffuse mid-range confidence mass.
    """
    rng = np.random.default_rng(cfg.seed)
    direction = rng.normal(size=cfg.n_features)
    direction /= np.linalg.norm(direction)
    n_attack = int(round(cfg.count * cfg.attack_fraction))
    labels = np.zeros(cfg.count, dtype=int)
    labels[:n_attack] = 1
    rng.shuffle(labels)
    events: list[Event] = []
    for i in range(cfg.count):
        truth = int(labels[i])
        x = rng.normal(size=cfg.n_features)
        if truth == 1:
            x = x + cfg.separation * direction
        raw = ",".join(f"{v:.4f}" for v in x)
        events.append(
            Event(
                id=make_event_id(LayerId.NETWORK, i),
                layer=LayerId.NETWORK,
                raw=raw,
                features=np.array([float(f"{v:.4f}") for v in x]),
                truth=truth,
                truth_class=NET_ATTACK_TYPES[int(rng.integers(len(NET_ATTACK_TYPES)))]
                if truth == 1
                else None,
            )
        )
    return events


def network_extractor(n_features: int = 40) -> FeatureExtractor:
    return FeatureExtractor(
        layer=LayerId.NETWORK,
        mode=FeatureMode.NUMERIC_PASSTHROUGH,
        columns=tuple(range(n_features)),
    )


def write_network_csv(events: list[Event], path: str) -> None:
    n = len(events[0].features) if events else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["event_id", "truth", "truth_class"] + [f"f{i:02d}" for i in range(n)]
        )
        for e in events:
            writer.writerow(
                [e.id, "" if e.truth is None else e.truth, e.truth_class or ""]
                + e.raw.split(",")
            )


def load_network_csv(path: str) -> list[Event]:
    events: list[Event] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 3
        for row in reader:
            cells = row[3:]
            raw = ",".join(cells)
            truth = int(row[1]) if row[1] else None
            events.append(
                Event(
                    id=row[0],
                    layer=LayerId.NETWORK,
                    raw=raw,
                    features=np.array([float(c) for c in cells[:n]]),
                    truth=truth,
                    truth_class=row[2] or None,
                )
            )
    return events


_HOST_PROCS = ("apache2", "sshd", "cron", "systemd", "mysqld", "nginx")
_HOST_SYSCALLS = (
    "read", "write", "open", "close", "poll", "select",
    "mmap", "fstat", "futex", "socket",
)
_HOST_USERS = ("root", "www-data", "backup", "admin", "deploy")
_HOST_ATTACK_TYPES = ("brute_force", "priv_escalation", "exfiltration", "webshell")


def _host_benign_line(rng: random.Random) -> str:
    proc = rng.choice(_HOST_PROCS)
    sc = rng.choice(_HOST_SYSCALLS)
    # Coarse numeric buckets keep the token vocabulary small enough for
    # dense tf-idf vectors over a 25k corpus.
    return (
        f"{proc} pid={1000 + rng.randrange(20)} syscall={sc} "
        f"fd={rng.randrange(3, 32)} ret=0 bytes={64 * rng.randrange(1, 64)} "
        f"latency_us={20 * rng.randrange(1, 20)}"
    )


def _host_attack_line(rng: random.Random, kind: str, ambiguity: float) -> str:
    pid = 1000 + rng.randrange(20)
    if kind == "brute_force":
        line = (
            f"sshd pid={pid} auth_fail user={rng.choice(_HOST_USERS)} "
            f"attempts={rng.randrange(4, 40)} src=10.0.{rng.randrange(16)}.{rng.randrange(32)}"
        )
    elif kind == "priv_escalation":
        line = (
            f"{rng.choice(_HOST_PROCS)} pid={pid} syscall=execve "
            f"path=/tmp/.{rng.randrange(16):x}bin uid=0 setuid=1"
        )
    elif kind == "exfiltration":
        line = (
            f"{rng.choice(_HOST_PROCS)} pid={pid} syscall=sendto "
            f"dst=203.0.{rng.randrange(16)}.{rng.randrange(32)} "
            f"bytes={4096 * rng.randrange(64, 128)} conn_burst={rng.randrange(8, 64)}"
        )
    else:
        line = (
            f"apache2 pid={pid} syscall=execve path=/var/www/u{rng.randrange(16):x}.sh "
            f"parent=apache2"
        )
    if rng.random() < ambiguity:
        # Camouflage: append ordinary activity tokens so the line shares
        # vocabulary with benign traffic.
        line += f" {_host_benign_line(rng)}"
    return line


def gen_hostlogs(cfg: HostGenConfig) -> list[Event]:
    """Templated process/syscall log lines with tunable ambiguity.

    Higher ambiguity blends benign vocabulary into attack lines (and
    mild anomalies into benign lines), which flattens a text model's
    confidence into the mid range.
    """
    rng = random.Random(cfg.seed)
    n_attack = int(round(cfg.count * cfg.attack_fraction))
    labels = [1] * n_attack + [0] * (cfg.count - n_attack)
    rng.shuffle(labels)
    events: list[Event] = []
    for i, truth in enumerate(labels):
        if truth == 1:
            kind = rng.choice(_HOST_ATTACK_TYPES)
            raw = _host_attack_line(rng, kind, cfg.ambiguity)
        else:
            kind = None
            raw = _host_benign_line(rng)
            if rng.random() < cfg.ambiguity * 0.3:
                raw += f" auth_fail user={rng.choice(_HOST_USERS)} attempts=1"
        events.append(
            Event(
                id=make_event_id(LayerId.HOST, i),
                layer=LayerId.HOST,
                raw=raw,
                # tf-idf features are fitted on the training split later;
                # a placeholder keeps the event valid until then.
                features=np.zeros(1),
                truth=truth,
                truth_class=kind,
            )
        )
    return events


def write_host_jsonl(events: list[Event], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(
                json.dumps(
                    {
                        "event_id": e.id,
                        "truth": e.truth,
                        "truth_class": e.truth_class,
                        "raw": e.raw,
                    }
                )
                + "\n"
            )


def load_host_jsonl(path: str) -> list[Event]:
    events: list[Event] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            events.append(
                Event(
                    id=data["event_id"],
                    layer=LayerId.HOST,
                    raw=data["raw"],
                    features=np.zeros(1),
                    truth=data["truth"],
                    truth_class=data.get("truth_class"),
                )
            )
    return events


def split_train_test(
    events: list[Event], ratio: float, seed: int
) -> tuple[list[Event], list[Event]]:
    """Seeded shuffle split; train gets round(n * ratio) events.

    The two halves are disjoint and exhaustive.

    Raises:
        InvalidSplitRatio: ratio not strictly inside (0, 1).
    """
    if not (0.0 < ratio < 1.0):
        raise InvalidSplitRatio(f"train ratio must be in (0, 1), got {ratio}")
    order = list(range(len(events)))
    random.Random(seed).shuffle(order)
    cut = int(round(len(events) * ratio))
    train = [events[i] for i in order[:cut]]
    test = [events[i] for i in order[cut:]]
    return train, test
