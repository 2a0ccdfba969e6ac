#!/usr/bin/env python3
"""Configuration dataclasses and enumerations for evsoar-sim."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import List, Optional, Tuple

from errors import InvalidArgumentError

DEFAULT_PAYLOAD_SWEEP = [100, 1_024, 10_240, 102_400, 1_048_576, 10_485_760]
FEATURE_COUNT = 16


class JitterKind(Enum):
    """Enumeration for link jitter models."""
    WIRED = "wired"
    WIRELESS = "wireless"


class AttackKind(IntEnum):
    """Attack tag carried by every log record (0 means benign)."""
    NONE = 0
    DOS = 1
    FUZZING = 2
    SPOOFING = 3
    TAMPER = 4


class PolicyMode(IntEnum):
    """What the SOAR Agent uploads when it connects to a charging point."""
    ML_LOGS = 0
    FL_PARAMS = 1


class ComponentStatus(IntEnum):
    """Status of an in-vehicle ECU or sensor."""
    ACTIVE = 0
    ISOLATED = 1
    DEACTIVATED = 2
    PATCHED = 3
    ROLLED_BACK = 4


class AlertKind(IntEnum):
    """Kind of threat an alert reports."""
    DOS = 1
    FUZZING = 2
    SPOOFING = 3
    TAMPER = 4
    ANOMALY = 5


class Severity(IntEnum):
    """Alert severity bands, ordered."""
    LOW = 0
    MEDIUM = 1
    HIGH = 2


class AlertSource(IntEnum):
    """Where an alert was raised."""
    EDGE_ML = 0
    AGENT_FL = 1
    RULE = 2


class ActionKind(IntEnum):
    """Automatic response actions."""
    DEACTIVATE_COMPONENT = 1
    ISOLATE_COMPONENT = 2
    APPLY_PATCH = 3
    ROLLBACK_UPDATE = 4
    UPDATE_FIRMWARE = 5
    NOTIFY_CENTRAL = 6


class Experiment(Enum):
    """Experiments the bench front end can run."""
    RTT = "rtt"
    THROUGHPUT = "throughput"
    STABILITY = "stability"
    IDS_COMPARE = "ids-compare"
    FL_POOLS = "fl-pools"
    RESPONSE_SCENARIO = "response-scenario"


LINK_BENCHES = (Experiment.RTT, Experiment.THROUGHPUT, Experiment.STABILITY)


def enum_label(member: Enum) -> str:
    """Lower-case display name used in CSV output and config files."""
    return member.name.lower()


@dataclass
class PolicyConfig:
    """Policy the Central SOAR deploys to every SOAR Agent."""
    max_buffer: int = 200_000
    mode: PolicyMode = PolicyMode.ML_LOGS
    local_epochs: int = 2
    alert_threshold: float = 0.5
    window_records: int = 128
    max_alerts: int = 256
    learning_rate: float = 0.05
    batch_size: int = 32
    pos_weight: float = 3.0
    local_isolation: bool = False

    def __post_init__(self) -> None:
        if self.max_buffer < 1:
            raise InvalidArgumentError("max_buffer must be at least 1")
        if not 0.0 < self.alert_threshold < 1.0:
            raise InvalidArgumentError("alert_threshold must lie in (0, 1)")
        if self.local_epochs < 0:
            raise InvalidArgumentError("local_epochs must be >= 0")
        if self.window_records < 1 or self.max_alerts < 1:
            raise InvalidArgumentError("window_records and max_alerts must be >= 1")


@dataclass
class FleetConfig:
    """Synthetic fleet parameters."""
    n_oems: int = 3
    vehicles_per_oem: int = 20
    windows_per_vehicle: int = 500
    imbalance_ratio: float = 4.8
    records_per_window: int = 128
    attack_intensity: float = 0.3
    min_intensity: float = 0.05
    shift_scale: float = 1.0

    def __post_init__(self) -> None:
        if min(self.n_oems, self.vehicles_per_oem, self.windows_per_vehicle) < 1:
            raise InvalidArgumentError("fleet counts must be >= 1")
        if self.records_per_window < 2:
            raise InvalidArgumentError("records_per_window must be >= 2")
        if self.imbalance_ratio <= 0:
            raise InvalidArgumentError("imbalance_ratio must be > 0")
        if not 0.0 < self.min_intensity <= self.attack_intensity <= 1.0:
            raise InvalidArgumentError(
                "intensities must satisfy 0 < min_intensity <= attack_intensity <= 1"
            )


@dataclass
class FederatedConfig:
    """Federated training parameters."""
    layer_sizes: Tuple[int, ...] = (FEATURE_COUNT, 64, 32, 1)
    rounds: int = 10
    local_epochs: int = 2
    learning_rate: float = 0.05
    batch_size: int = 32
    pos_weight: float = 3.0
    test_fraction: float = 0.3


@dataclass
class CentralConfig:
    """Central SOAR training and pooling parameters."""
    rounds: int = 200
    learning_rate: float = 0.1
    reg_lambda: float = 1.0
    mix_pooling: bool = True


@dataclass
class EdgeConfig:
    """Edge-SOAR assessment parameters."""
    alert_threshold: float = 0.5
    window_records: int = 128
    signature_screening: bool = True


@dataclass
class ExperimentConfig:
    """Everything one bench invocation needs."""
    experiment: Experiment
    presets: List[str] = field(default_factory=list)
    payload_sizes: List[int] = field(
        default_factory=lambda: list(DEFAULT_PAYLOAD_SWEEP)
    )
    trials: int = 101
    seed: int = 0
    seeds: int = 1
    duration_s: int = 300
    output_dir: str = "results"
    presets_file: Optional[str] = None
    rules_file: Optional[str] = None
    fleet: FleetConfig = field(default_factory=FleetConfig)
    federated: FederatedConfig = field(default_factory=FederatedConfig)
    central: CentralConfig = field(default_factory=CentralConfig)
    edge: EdgeConfig = field(default_factory=EdgeConfig)

    def __post_init__(self) -> None:
        sweep_needed = self.experiment in (Experiment.RTT, Experiment.THROUGHPUT)
        if sweep_needed and not self.payload_sizes:
            raise InvalidArgumentError("payload sweep must not be empty")
        if self.trials < 1 or self.seeds < 1 or self.duration_s < 1:
            raise InvalidArgumentError("trials, seeds and duration must be >= 1")
        if self.experiment in LINK_BENCHES and self.seeds != 1:
            raise InvalidArgumentError("link benchmarks run one seed; vary --seed")
