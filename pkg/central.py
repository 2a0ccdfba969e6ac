#!/usr/bin/env python3
"""Central SOAR and the OEM server stub.

The central keeps an append-only store of relayed log features, trains the
boosted-stump assessment model, aggregates federated parameters per pool and
queues downloads (model updates and patches) in per-vehicle mailboxes that the
edges drain when a vehicle connects.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

from config import ActionKind, CentralConfig, Severity, enum_label
from edge import split_windows
from errors import (
    DegenerateDataError,
    InvalidArgumentError,
    PatchVersionError,
    StateError,
    UnknownComponentError,
    UnknownOemError,
)
from learn import (
    CentralModel,
    Dataset,
    FeatureVector,
    ModelParams,
    extract_features,
    fedavg,
    train_central,
)
from logging_utils import Logger
from records import Alert, ResponseAction
from utils import write_csv
from wire import (
    LogBatch,
    Message,
    MessageKind,
    unpack_alert,
    unpack_log_batch,
    unpack_params,
)

WINDOW_RECORDS = 128

MailItem = Union[ResponseAction, ModelParams]


@dataclass(frozen=True, order=True)
class PoolKey:
    """``single(oem_id)`` or ``mix`` (oem_id None)."""
    oem_id: Optional[int] = None

    @classmethod
    def single(cls, oem_id: int) -> "PoolKey":
        return cls(oem_id)

    @classmethod
    def mix(cls) -> "PoolKey":
        return cls(None)

    @property
    def is_mix(self) -> bool:
        return self.oem_id is None

    @property
    def label(self) -> str:
        return "mix" if self.is_mix else f"single-{self.oem_id}"


@dataclass(frozen=True)
class PatchNotice:
    oem_id: int
    component_id: int
    patch_version: int


class OemServer:
    """Stub OEM back end: turns high-severity alerts into patch notices."""

    def __init__(self, oem_id: int, component_count: int) -> None:
        self.oem_id = oem_id
        self.component_count = component_count
        self.alerts: List[Alert] = []
        self._released: Dict[int, int] = {}

    def consume(self, alert: Alert) -> Optional[PatchNotice]:
        self.alerts.append(alert)
        if alert.severity != Severity.HIGH:
            return None
        if not 0 <= alert.component_id < self.component_count:
            return None
        if alert.component_id in self._released:
            return None
        version = 1
        self._released[alert.component_id] = version
        return PatchNotice(self.oem_id, alert.component_id, version)


@dataclass
class CentralState:
    log_store: List[Tuple[int, Dataset]] = field(default_factory=list)
    param_pool: Dict[PoolKey, List[ModelParams]] = field(
        default_factory=lambda: defaultdict(list)
    )
    current_model: Optional[CentralModel] = None
    model_version: int = 0
    global_params: Dict[PoolKey, ModelParams] = field(default_factory=dict)
    oem_registry: Set[int] = field(default_factory=set)

    @property
    def store_size(self) -> int:
        return sum(len(batch) for _, batch in self.log_store)


LEDGER_COLUMNS = (
    "time",
    "vehicle",
    "oem",
    "component",
    "kind",
    "severity",
    "score",
    "source",
)
MODEL_HISTORY_COLUMNS = ("model", "version", "sample_count", "rounds")


class CentralSoar:
    """Central SOAR state machine; every call is serialized by the caller."""

    def __init__(self, config: Optional[CentralConfig] = None) -> None:
        self.config = config or CentralConfig()
        self.state = CentralState()
        self.oem_servers: Dict[int, OemServer] = {}
        self.vehicles: Dict[int, int] = {}
        self.credentials: Dict[int, bytes] = {}
        self.mailboxes: Dict[int, List[MailItem]] = defaultdict(list)
        self.patch_versions: Dict[Tuple[int, int], int] = {}
        self.edges: List[object] = []
        self.ledger: List[Tuple[float, int, int, Alert]] = []
        self.model_history: List[Tuple[str, int, int, int]] = []

    # registry

    def register_oem(self, oem_id: int, component_count: int) -> None:
        if component_count < 1:
            raise InvalidArgumentError("component_count must be >= 1")
        self.state.oem_registry.add(oem_id)
        self.oem_servers[oem_id] = OemServer(oem_id, component_count)

    def register_vehicle(self, vehicle_id: int, oem_id: int, token: bytes) -> None:
        self._require_oem(oem_id)
        self.vehicles[vehicle_id] = oem_id
        self.credentials[vehicle_id] = token

    def attach_edge(self, edge) -> None:
        """Edges receive every retrained assessment model."""
        self.edges.append(edge)
        if self.state.current_model is not None:
            edge.install_model(self.state.current_model)

    def _require_oem(self, oem_id: int) -> None:
        if oem_id not in self.state.oem_registry:
            raise UnknownOemError(f"OEM {oem_id} is not registered")

    # logs and the assessment model

    def ingest(
        self, oem_id: int, batch: Union[Dataset, Sequence[FeatureVector], LogBatch]
    ) -> int:
        """Append features to the store; returns the number of rows added."""
        self._require_oem(oem_id)
        if isinstance(batch, LogBatch):
            windows = split_windows(batch.trace, WINDOW_RECORDS)
            vectors = [extract_features(w) for w in windows]
            data = Dataset.from_vectors(vectors)
        elif isinstance(batch, Dataset):
            data = batch
        else:
            data = Dataset.from_vectors(list(batch))
        if len(data):
            self.state.log_store.append((oem_id, data))
        return len(data)

    def store(self) -> Dataset:
        return Dataset.concat([data for _, data in self.state.log_store])

    def retrain(self) -> Optional[CentralModel]:
        """Train on the full store, bump the version and push to every edge."""
        data = self.store()
        if len(data) == 0:
            Logger.warn("central: log store is empty, nothing to retrain")
            return None
        try:
            cfg = self.config
            model = train_central(data, cfg.rounds, cfg.learning_rate, cfg.reg_lambda)
        except DegenerateDataError as e:
            Logger.warn(f"central: retrain skipped ({e})")
            return None

        self.state.model_version += 1
        model = CentralModel(
            model.stumps,
            model.learning_rate,
            model.rounds,
            model.base_score,
            self.state.model_version,
        )
        self.state.current_model = model
        self.model_history.append(("central", model.version, len(data), model.rounds))
        for edge in self.edges:
            edge.install_model(model)
        Logger.info(
            f"central: assessment model v{model.version} trained on {len(data)} windows"
        )
        return model

    # federated pools

    def submit_params(self, params: ModelParams) -> List[PoolKey]:
        """Params go to single(oem) and, with mixed pooling, also to mix."""
        self._require_oem(params.oem_id)
        keys = [PoolKey.single(params.oem_id)]
        if self.config.mix_pooling:
            keys.append(PoolKey.mix())
        for key in keys:
            self.state.param_pool[key].append(params)
        return keys

    def aggregate_pool(self, key: PoolKey) -> Optional[ModelParams]:
        """FedAvg the pending updates of one pool and queue the result.

        With mixed pooling only the mix model is handed out (to every
        vehicle); otherwise each single model goes to its own OEM's vehicles.
        """
        pool = self.state.param_pool.get(key) or []
        if not pool:
            Logger.debug(f"central: pool {key.label} is empty")
            return None
        if not key.is_mix and any(p.oem_id != key.oem_id for p in pool):
            Logger.security_event(
                "POOL_BOUNDARY", f"foreign parameters found in pool {key.label}"
            )
            raise StateError(f"pool {key.label} holds parameters of another OEM")

        previous = self.state.global_params.get(key)
        version = (previous.version if previous else 0) + 1
        averaged = fedavg(pool)
        result = averaged.with_weights(
            averaged.weights, oem_id=key.oem_id or 0, version=version
        )
        self.state.global_params[key] = result
        self.state.param_pool[key] = []
        self.model_history.append((key.label, version, result.sample_count, 0))

        if key.is_mix == self.config.mix_pooling:
            for vehicle_id, oem_id in sorted(self.vehicles.items()):
                if key.is_mix or oem_id == key.oem_id:
                    self._queue_model(vehicle_id, result)
        Logger.debug(
            f"central: pool {key.label} v{version} from {len(pool)} updates "
            f"({result.sample_count} samples)"
        )
        return result

    def aggregate_all(self) -> Dict[PoolKey, ModelParams]:
        """One federated round over every pool with pending updates."""
        results = {}
        pending = sorted(self.state.param_pool, key=lambda k: (k.is_mix, k.oem_id or 0))
        for key in pending:
            result = self.aggregate_pool(key)
            if result is not None:
                results[key] = result
        return results

    def _queue_model(self, vehicle_id: int, params: ModelParams) -> None:
        box = self.mailboxes[vehicle_id]
        box[:] = [item for item in box if not isinstance(item, ModelParams)]
        box.append(params)

    def drain_mailbox(self, vehicle_id: int) -> List[MailItem]:
        return self.mailboxes.pop(vehicle_id, [])

    # patches and alerts

    def issue_patch(self, notice: PatchNotice) -> Optional[ResponseAction]:
        """Queue ApplyPatch for the OEM's vehicles; a repeated notice is a no-op."""
        self._require_oem(notice.oem_id)
        server = self.oem_servers[notice.oem_id]
        if not 0 <= notice.component_id < server.component_count:
            raise UnknownComponentError(
                f"OEM {notice.oem_id} has no component {notice.component_id}"
            )
        key = (notice.oem_id, notice.component_id)
        current = self.patch_versions.get(key, 0)
        if notice.patch_version < current:
            raise PatchVersionError(
                f"patch v{notice.patch_version} for component {notice.component_id} "
                f"is older than v{current}"
            )
        if notice.patch_version == current:
            return None

        self.patch_versions[key] = notice.patch_version
        action = ResponseAction(
            ActionKind.APPLY_PATCH,
            notice.component_id,
            f"oem-{notice.oem_id}-patch",
            notice.patch_version,
        )
        for vehicle_id, oem_id in sorted(self.vehicles.items()):
            if oem_id == notice.oem_id:
                self.mailboxes[vehicle_id].append(action)
        Logger.info(
            f"central: patch v{notice.patch_version} for OEM {notice.oem_id} "
            f"component {notice.component_id} queued"
        )
        return action

    def record_alert(self, alert: Alert, now_ms: float = 0.0) -> None:
        oem_id = self.vehicles.get(alert.vehicle_id, 0)
        self.ledger.append((now_ms, alert.vehicle_id, oem_id, alert))
        server = self.oem_servers.get(oem_id)
        if server is None:
            return
        notice = server.consume(alert)
        if notice is not None:
            self.issue_patch(notice)

    def receive(self, message: Message, now_ms: float = 0.0) -> None:
        """Entry point for frames relayed by the edges."""
        if message.kind == MessageKind.LOG_BATCH:
            batch = unpack_log_batch(message.body)
            self.ingest(batch.oem_id, batch)
        elif message.kind == MessageKind.FL_PARAMS:
            params = unpack_params(message.body)
            self.submit_params(params)
        elif message.kind == MessageKind.ALERT:
            self.record_alert(unpack_alert(message.body), now_ms)
        else:
            raise InvalidArgumentError(f"central cannot consume {message.kind.name}")

    # reporting

    def export_ledger(self, path: str) -> str:
        rows = (
            (
                time_ms,
                vehicle_id,
                oem_id,
                alert.component_id,
                enum_label(alert.kind),
                enum_label(alert.severity),
                alert.score,
                enum_label(alert.source),
            )
            for time_ms, vehicle_id, oem_id, alert in self.ledger
        )
        return write_csv(path, LEDGER_COLUMNS, rows)

    def export_model_history(self, path: str) -> str:
        return write_csv(path, MODEL_HISTORY_COLUMNS, self.model_history)
