#!/usr/bin/env python3
"""Discrete-event topology and the benchmark experiments.

Simulated time is in milliseconds. Events fire in time order; events at the
same instant fire in the order they were scheduled. A charging session is
computed in one step when its event fires and keeps its edge busy until the
session's end, so sessions on one edge never overlap.

CSV layouts (column order is fixed):

    rtt          preset, payload_bytes, trials, median_rtt_ms
    throughput   preset, payload_bytes, median_transfer_ms, throughput_mbps
    stability    preset, t_s, delivery_ms
    ids-compare  setup, class, recall, support, accuracy, payload_bytes, model
    fl-pools     seed, round, pool, accuracy, recall_class0, recall_class1
    response     preset, seed, response_ms, session_ms, bytes_up, bytes_down
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from agent import SessionReport, SoarAgent
from central import CentralSoar, PoolKey
from config import (
    AttackKind,
    CentralConfig,
    EdgeConfig,
    ExperimentConfig,
    FederatedConfig,
    PolicyConfig,
    PolicyMode,
    enum_label,
)
from datagen import (
    Fleet,
    OemProfile,
    default_profiles,
    gen_fleet_from_config,
    gen_trace,
    gen_vehicle,
    inject_attack,
)
from edge import EdgeSoar, RuleSet, load_rules
from errors import InvalidArgumentError, StateError
from learn import (
    CentralModel,
    Dataset,
    Metrics,
    ModelParams,
    evaluate,
    ffnn_predict_proba,
    ffnn_train,
    init_params,
    predict_central_batch,
    threshold,
    train_central,
    train_test_split,
)
from logging_utils import Logger
from netlink import (
    CENTRAL_LINK,
    LinkConfig,
    get_preset,
    load_presets,
    measured_throughput,
    median_rtt,
    median_transfer,
    stability_series,
)
from security import vehicle_token
from utils import substream
from wire import (
    MessageKind,
    frame_size,
    log_batch_body_size,
    params_body_size,
)

RTT_COLUMNS = ("preset", "payload_bytes", "trials", "median_rtt_ms")
THROUGHPUT_COLUMNS = (
    "preset",
    "payload_bytes",
    "median_transfer_ms",
    "throughput_mbps",
)
STABILITY_COLUMNS = ("preset", "t_s", "delivery_ms")
IDS_COLUMNS = (
    "setup",
    "class",
    "recall",
    "support",
    "accuracy",
    "payload_bytes",
    "model",
)
FL_POOL_COLUMNS = (
    "seed",
    "round",
    "pool",
    "accuracy",
    "recall_class0",
    "recall_class1",
)
RESPONSE_COLUMNS = (
    "preset",
    "seed",
    "response_ms",
    "session_ms",
    "bytes_up",
    "bytes_down",
)

DEFAULT_VEHICLE_LINK = "EVSOAR-PLC100M"
SESSION_SPACING_MS = 1_000.0
SCENARIO_VEHICLES = 2
SCENARIO_WINDOWS = 100

SETUP_ML = "ML"
SETUP_FL_SINGLE = "FL-single"
SETUP_FL_MIX = "FL-mix"


# event engine


@dataclass(order=True)
class _Event:
    time_ms: float
    seq: int
    action: Callable[[], None] = field(compare=False)
    label: str = field(compare=False, default="")


class EventScheduler:
    """Min-heap of (time, insertion order) events and a simulated clock."""

    def __init__(self, start_ms: float = 0.0) -> None:
        self.now = start_ms
        self._queue: List[_Event] = []
        self._seq = itertools.count()
        self.fired: List[Tuple[float, str]] = []

    def __len__(self) -> int:
        return len(self._queue)

    def schedule(
        self, time_ms: float, action: Callable[[], None], label: str = ""
    ) -> None:
        if time_ms < self.now:
            raise InvalidArgumentError(
                f"cannot schedule {label or 'event'} at {time_ms} before {self.now}"
            )
        heapq.heappush(self._queue, _Event(time_ms, next(self._seq), action, label))

    def advance(self, until_ms: float) -> None:
        """Fire every event due up to until_ms, then move the clock there."""
        if until_ms < self.now:
            raise InvalidArgumentError(
                f"time regression: {until_ms} ms is before {self.now} ms"
            )
        while self._queue and self._queue[0].time_ms <= until_ms:
            event = heapq.heappop(self._queue)
            self.now = event.time_ms
            self.fired.append((event.time_ms, event.label))
            event.action()
        self.now = until_ms

    def run(self) -> float:
        """Drain the schedule, including events scheduled while draining."""
        while self._queue:
            self.advance(self._queue[0].time_ms)
        return self.now


# topology


@dataclass
class EdgeNode:
    edge: EdgeSoar
    link: LinkConfig
    busy_until_ms: float = 0.0
    reports: List[SessionReport] = field(default_factory=list)


class Topology:
    """Vehicles, charging points and the central on one simulated timeline."""

    def __init__(
        self,
        central: CentralSoar,
        central_link: LinkConfig,
        seed: int = 0,
        rules: Optional[RuleSet] = None,
        edge_config: Optional[EdgeConfig] = None,
    ) -> None:
        self.central = central
        self.central_link = central_link
        self.seed = seed
        self.rules = rules
        self.edge_config = edge_config or EdgeConfig()
        self.edges: List[EdgeNode] = []
        self.agents: Dict[int, SoarAgent] = {}
        self.scheduler = EventScheduler()
        self.reports: List[SessionReport] = []

    @property
    def now(self) -> float:
        return self.scheduler.now

    def add_edge(self, link: LinkConfig) -> EdgeNode:
        edge = EdgeSoar(
            len(self.edges) + 1,
            self.central.credentials,
            config=self.edge_config,
            rules=self.rules,
            model=self.central.state.current_model,
            central=self.central,
            central_link=self.central_link,
            seed=self.seed,
        )
        self.central.attach_edge(edge)
        node = EdgeNode(edge, link)
        self.edges.append(node)
        return node

    def add_agent(self, agent: SoarAgent) -> SoarAgent:
        state = agent.state
        self.central.register_vehicle(state.vehicle_id, state.oem_id, state.token)
        self.agents[state.vehicle_id] = agent
        return agent

    def plug_in(
        self,
        vehicle_id: int,
        edge_index: int,
        at_ms: float,
        before: Optional[Callable[[SoarAgent], None]] = None,
    ) -> None:
        """Schedule a charging session; ``before`` runs when the vehicle arrives."""
        if vehicle_id not in self.agents:
            raise InvalidArgumentError(f"vehicle {vehicle_id} is not in the topology")
        node = self.edges[edge_index]
        self.scheduler.schedule(
            at_ms,
            lambda: self._arrive(vehicle_id, node, before),
            f"arrive vehicle-{vehicle_id} edge-{node.edge.edge_id}",
        )

    def _arrive(
        self,
        vehicle_id: int,
        node: EdgeNode,
        before: Optional[Callable[[SoarAgent], None]],
    ) -> None:
        if before is not None:
            before(self.agents[vehicle_id])
        self._session(vehicle_id, node)

    def _session(self, vehicle_id: int, node: EdgeNode) -> None:
        if node.busy_until_ms > self.now:
            # charging point occupied: queue behind the current session
            self.scheduler.schedule(
                node.busy_until_ms,
                lambda: self._session(vehicle_id, node),
                f"retry vehicle-{vehicle_id} edge-{node.edge.edge_id}",
            )
            return
        agent = self.agents[vehicle_id]
        report = agent.charge_session(node.edge, node.link, self.now, self.seed)
        node.busy_until_ms = report.end_ms
        node.reports.append(report)
        self.reports.append(report)

    def run(self) -> float:
        return self.scheduler.run()


# link benchmarks


def resolve_links(config: ExperimentConfig) -> List[LinkConfig]:
    """Links named by the config, or every preset of the table."""
    presets = load_presets(config.presets_file)
    names = config.presets or list(presets)
    return [get_preset(name, presets) for name in names]


def rtt_rows(
    links: Sequence[LinkConfig], sizes: Sequence[int], trials: int, seed: int
) -> List[Tuple[str, int, int, float]]:
    return [
        (link.name, size, trials, median_rtt(link, size, trials, seed))
        for link in links
        for size in sizes
    ]


def throughput_rows(
    links: Sequence[LinkConfig], sizes: Sequence[int], trials: int, seed: int
) -> List[Tuple[str, int, float, float]]:
    rows = []
    for link in links:
        for size in sizes:
            rows.append(
                (
                    link.name,
                    size,
                    median_transfer(link, size, trials, seed),
                    measured_throughput(link, size, trials, seed),
                )
            )
    return rows


def stability_rows(
    links: Sequence[LinkConfig], duration_s: int, seed: int
) -> List[Tuple[str, int, float]]:
    return [
        (link.name, t, delay)
        for link in links
        for t, delay in stability_series(link, duration_s, seed)
    ]


# detection experiments


@dataclass
class FederatedRun:
    models: Dict[PoolKey, ModelParams]
    history: List[Tuple[int, str, Metrics]]
    payload_bytes: int


@dataclass
class IdsResult:
    """Held-out metrics and uploaded bytes per setup."""
    metrics: Dict[str, Metrics]
    payload_bytes: Dict[str, int]
    history: List[Tuple[int, str, Metrics]] = field(default_factory=list)
    test_size: int = 0


def split_fleet(
    fleet: Fleet, test_fraction: float, seed: int
) -> Tuple[Dict[int, List[Dataset]], Dataset]:
    """Per-vehicle stratified hold-out; the held-out rows form one common test set."""
    train: Dict[int, List[Dataset]] = {}
    tests: List[Dataset] = []
    for oem_id in fleet.oem_ids:
        train[oem_id] = []
        for index, data in enumerate(fleet.datasets[oem_id]):
            split_seed = int(substream(seed, "holdout", oem_id, index).integers(2**63))
            kept, held = train_test_split(data, test_fraction, split_seed)
            train[oem_id].append(kept)
            tests.append(held)
    return train, Dataset.concat(tests)


def log_upload_bytes(data: Dataset) -> int:
    """Frame bytes of uploading every window of data as one LOG_BATCH each."""
    return sum(
        frame_size(MessageKind.LOG_BATCH, log_batch_body_size(int(n)))
        for n in data.record_counts
    )


def params_upload_bytes(layer_sizes: Sequence[int]) -> int:
    return frame_size(MessageKind.FL_PARAMS, params_body_size(layer_sizes))


def _mean_metrics(parts: Sequence[Metrics]) -> Metrics:
    return Metrics(
        recall_class0=float(np.mean([m.recall_class0 for m in parts])),
        recall_class1=float(np.mean([m.recall_class1 for m in parts])),
        accuracy=float(np.mean([m.accuracy for m in parts])),
        support0=parts[0].support0,
        support1=parts[0].support1,
    )


def _score_params(params: ModelParams, test: Dataset) -> Metrics:
    return evaluate(threshold(ffnn_predict_proba(params, test.features)), test.labels)


def federated_training(
    train: Dict[int, List[Dataset]],
    test: Dataset,
    federated: FederatedConfig,
    mix: bool,
    seed: int,
) -> FederatedRun:
    """Rounds of local training and central pooling, starting from one init."""
    central = CentralSoar(CentralConfig(mix_pooling=mix))
    for oem_id in train:
        central.register_oem(oem_id, 1)
    start = init_params(federated.layer_sizes, seed)
    pooled: Dict[PoolKey, ModelParams] = {}
    history: List[Tuple[int, str, Metrics]] = []
    upload = params_upload_bytes(federated.layer_sizes)
    payload = 0

    for round_no in range(1, federated.rounds + 1):
        for oem_id, vehicles in sorted(train.items()):
            key = PoolKey.mix() if mix else PoolKey.single(oem_id)
            base = pooled.get(key, start)
            base = base.with_weights(base.weights, oem_id=oem_id)
            for index, data in enumerate(vehicles):
                rng = substream(seed, "fl-local", key.label, round_no, oem_id, index)
                update = ffnn_train(
                    base,
                    data,
                    federated.local_epochs,
                    federated.learning_rate,
                    int(rng.integers(2**63)),
                    batch_size=federated.batch_size,
                    pos_weight=federated.pos_weight,
                )
                central.submit_params(update)
                payload += upload
        for key, params in central.aggregate_all().items():
            if key.is_mix != mix:
                continue
            pooled[key] = params
            history.append((round_no, key.label, _score_params(params, test)))
        Logger.debug(
            f"federated round {round_no}/{federated.rounds} "
            f"({'mix' if mix else 'single'} pooling)"
        )
    return FederatedRun(pooled, history, payload)


def _prepare(
    config: ExperimentConfig, seed: int
) -> Tuple[Dict[int, List[Dataset]], Dataset]:
    fleet = gen_fleet_from_config(config.fleet, seed)
    return split_fleet(fleet, config.federated.test_fraction, seed)


def fl_pools(config: ExperimentConfig, seed: int) -> List[Tuple[int, str, Metrics]]:
    """Per-round held-out metrics of every single-OEM pool and the mix pool."""
    train, test = _prepare(config, seed)
    single = federated_training(train, test, config.federated, mix=False, seed=seed)
    mix = federated_training(train, test, config.federated, mix=True, seed=seed)
    return single.history + mix.history


def ids_compare(config: ExperimentConfig, seed: int) -> IdsResult:
    """Centralized stumps vs federated single-OEM and mixed-OEM pooling."""
    train, test = _prepare(config, seed)
    train_all = Dataset.concat([d for parts in train.values() for d in parts])

    cfg = config.central
    model = train_central(train_all, cfg.rounds, cfg.learning_rate, cfg.reg_lambda)
    ml_metrics = evaluate(
        threshold(predict_central_batch(model, test.features)), test.labels
    )

    single = federated_training(train, test, config.federated, mix=False, seed=seed)
    mix = federated_training(train, test, config.federated, mix=True, seed=seed)
    single_metrics = _mean_metrics(
        [_score_params(params, test) for _, params in sorted(single.models.items())]
    )
    mix_metrics = _score_params(mix.models[PoolKey.mix()], test)

    Logger.info(
        f"ids-compare seed {seed}: accuracy ML {ml_metrics.accuracy:.3f}, "
        f"FL-single {single_metrics.accuracy:.3f}, FL-mix {mix_metrics.accuracy:.3f}"
    )
    return IdsResult(
        metrics={
            SETUP_ML: ml_metrics,
            SETUP_FL_SINGLE: single_metrics,
            SETUP_FL_MIX: mix_metrics,
        },
        payload_bytes={
            SETUP_ML: log_upload_bytes(train_all),
            SETUP_FL_SINGLE: single.payload_bytes,
            SETUP_FL_MIX: mix.payload_bytes,
        },
        history=single.history + mix.history,
        test_size=len(test),
    )


SETUP_MODELS = {
    SETUP_ML: "boosted-stumps",
    SETUP_FL_SINGLE: "ffnn",
    SETUP_FL_MIX: "ffnn",
}


def ids_rows(result: IdsResult) -> List[list]:
    rows: List[list] = []
    for setup, model in SETUP_MODELS.items():
        rows.extend(
            result.metrics[setup].csv_rows(setup, result.payload_bytes[setup], model)
        )
    return rows


def fl_pool_rows(
    history: Sequence[Tuple[int, str, Metrics]], seed: int
) -> List[Tuple[int, int, str, float, float, float]]:
    return [
        (seed, round_no, pool, m.accuracy, m.recall_class0, m.recall_class1)
        for round_no, pool, m in history
    ]


# response scenario


def scenario_model(config: ExperimentConfig, seed: int) -> Tuple[Fleet, CentralModel]:
    """Central model trained on a small fleet, as the scenario's precondition."""
    small = replace(
        config.fleet,
        vehicles_per_oem=min(config.fleet.vehicles_per_oem, SCENARIO_VEHICLES),
        windows_per_vehicle=min(config.fleet.windows_per_vehicle, SCENARIO_WINDOWS),
    )
    fleet = gen_fleet_from_config(small, seed)
    central = CentralSoar(config.central)
    for oem_id, profile in fleet.profiles.items():
        central.register_oem(oem_id, profile.component_count)
        central.ingest(oem_id, fleet.oem_dataset(oem_id))
    model = central.retrain()
    if model is None:
        raise StateError("response scenario needs a trained central model")
    return fleet, model


def response_run(
    config: ExperimentConfig,
    link: LinkConfig,
    profile: OemProfile,
    window: np.ndarray,
    model: CentralModel,
    seed: int,
) -> SessionReport:
    """One vehicle uploads an attacked window and takes the response back."""
    central = CentralSoar(config.central)
    central.register_oem(profile.oem_id, profile.component_count)
    vehicle_id = 1
    token = vehicle_token(seed, vehicle_id)
    central.register_vehicle(vehicle_id, profile.oem_id, token)
    edge = EdgeSoar(
        1,
        central.credentials,
        config=config.edge,
        rules=load_rules(config.rules_file),
        model=model,
        central=central,
        seed=seed,
    )
    policy = PolicyConfig(window_records=config.fleet.records_per_window)
    agent = SoarAgent(
        vehicle_id, profile.oem_id, token, profile.component_count, policy
    )
    agent.record_window(window)
    return agent.charge_session(edge, link, 0.0, seed)


def response_scenario(
    config: ExperimentConfig,
    seed: int,
    links: Optional[Sequence[LinkConfig]] = None,
) -> Dict[str, SessionReport]:
    """Alert-to-acknowledged-response session per link, same window for all."""
    links = list(links) if links is not None else resolve_links(config)
    fleet, model = scenario_model(config, seed)
    profile = fleet.profiles[fleet.oem_ids[0]]
    rng = substream(seed, "scenario")
    window = gen_trace(profile, config.fleet.records_per_window, rng)
    window = inject_attack(window, AttackKind.DOS, config.fleet.attack_intensity, rng)

    reports = {}
    for link in links:
        report = response_run(config, link, profile, window, model, seed)
        if report.response_ms is None:
            raise StateError(f"{link.name}: no response action reached the vehicle")
        reports[link.name] = report
        Logger.debug(f"response over {link.name}: {report.response_ms:.3f} ms")
    return reports


def response_rows(
    reports: Dict[str, SessionReport], seed: int
) -> List[Tuple[str, int, float, float, int, int]]:
    return [
        (
            name,
            seed,
            report.response_ms,
            report.elapsed_ms,
            report.bytes_up,
            report.bytes_down,
        )
        for name, report in reports.items()
    ]


# fleet run


@dataclass
class FleetRun:
    reports: List[SessionReport]
    central: CentralSoar
    topology: Topology

    def bytes_per_session(self) -> float:
        return float(np.mean([r.bytes_up for r in self.reports]))

    def uploaded_kinds(self) -> List[MessageKind]:
        return [kind for r in self.reports for kind in r.kinds("up")]


def _drive(
    agent: SoarAgent,
    profile: OemProfile,
    vehicle_index: int,
    config: ExperimentConfig,
    seed: int,
) -> None:
    """Generate the vehicle's trip logs and feed them through its agent."""
    fleet = config.fleet
    data, traces = gen_vehicle(
        profile,
        vehicle_index,
        fleet.windows_per_vehicle,
        fleet.imbalance_ratio,
        seed,
        fleet.records_per_window,
        fleet.attack_intensity,
        fleet.min_intensity,
    )
    federated = agent.policy.mode == PolicyMode.FL_PARAMS
    for trace, row in zip(traces, data.features):
        agent.record_window(trace, row)
        if federated:
            agent.local_infer(trace)


def fleet_run(config: ExperimentConfig, mode: PolicyMode, seed: int) -> FleetRun:
    """Every vehicle drives, charges once, and the central then updates."""
    fleet = config.fleet
    federated = config.federated
    profiles = default_profiles(fleet.n_oems, fleet.shift_scale)
    central = CentralSoar(config.central)
    for profile in profiles:
        central.register_oem(profile.oem_id, profile.component_count)

    presets = load_presets(config.presets_file)
    link = get_preset(
        config.presets[0] if config.presets else DEFAULT_VEHICLE_LINK, presets
    )
    topology = Topology(
        central,
        get_preset(CENTRAL_LINK, presets),
        seed,
        rules=load_rules(config.rules_file),
        edge_config=config.edge,
    )
    for _ in profiles:
        topology.add_edge(link)

    policy = PolicyConfig(
        mode=mode,
        window_records=fleet.records_per_window,
        local_epochs=federated.local_epochs,
        learning_rate=federated.learning_rate,
        batch_size=federated.batch_size,
        pos_weight=federated.pos_weight,
    )
    vehicle_id = 0
    for profile in profiles:
        for index in range(fleet.vehicles_per_oem):
            vehicle_id += 1
            local = None
            if mode == PolicyMode.FL_PARAMS:
                local = init_params(federated.layer_sizes, seed, profile.oem_id)
            agent = SoarAgent(
                vehicle_id,
                profile.oem_id,
                vehicle_token(seed, vehicle_id),
                profile.component_count,
                policy,
                local_params=local,
                feature_shift=profile.feature_shift,
            )
            topology.add_agent(agent)
            topology.plug_in(
                vehicle_id,
                (vehicle_id - 1) % len(topology.edges),
                index * SESSION_SPACING_MS,
                before=lambda a, p=profile, i=index: _drive(a, p, i, config, seed),
            )

    topology.run()
    if mode == PolicyMode.ML_LOGS:
        central.retrain()
    else:
        central.aggregate_all()
    Logger.info(
        f"fleet run ({enum_label(mode)}): {len(topology.reports)} sessions, "
        f"{sum(r.bytes_up for r in topology.reports)} bytes uploaded"
    )
    return FleetRun(topology.reports, central, topology)
