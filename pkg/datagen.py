#!/usr/bin/env python3
"""Synthetic per-OEM vehicle log traces and injected attacks.

Benign traffic: every component sends one periodic message identifier with
Gaussian timing noise. Byte 0 is a 4-bit rolling counter (with occasional
dropped frames), byte 1 a slowly varying signal, byte 7 the component tag and
the remaining bytes are zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import FEATURE_COUNT, AttackKind, FleetConfig, enum_label
from errors import InvalidArgumentError
from learn import Dataset, extract_features
from logging_utils import Logger
from records import TRACE_DTYPE, empty_trace
from utils import substream, write_csv

BASE_MESSAGE_ID = 0x100
MAX_MESSAGE_ID = 0x7FF
TIMING_NOISE = 0.05
COUNTER_DROP_PROB = 0.02
SIGNAL_PERIOD = 40
DOS_MESSAGE_ID = 0x000
DOS_GAP_US = 20

ATTACK_KINDS = (
    AttackKind.DOS,
    AttackKind.FUZZING,
    AttackKind.SPOOFING,
    AttackKind.TAMPER,
)

# benign-baseline offsets along channels that attacks also move
SHIFT_CHANNELS = (3, 7, 9, 14)
SHIFT_UNITS = (0.03, 0.03, 0.05, 0.02)
SIGNATURE_CHANNELS = (10, 11, 15)
SIGNATURE_OFFSET = 0.05


@dataclass
class OemProfile:
    oem_id: int
    feature_shift: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_COUNT))
    component_count: int = 8
    traffic_rate_hz: float = 800.0

    def __post_init__(self) -> None:
        self.feature_shift = np.asarray(self.feature_shift, dtype=np.float64)
        if self.feature_shift.shape != (FEATURE_COUNT,):
            raise InvalidArgumentError(f"feature_shift needs {FEATURE_COUNT} values")
        if self.component_count < 1:
            raise InvalidArgumentError("component_count must be >= 1")
        if self.traffic_rate_hz <= 0:
            raise InvalidArgumentError("traffic_rate_hz must be > 0")

    def message_id(self, component_id: int) -> int:
        return BASE_MESSAGE_ID + 0x10 * component_id

    def component_shares(self) -> np.ndarray:
        weights = 1.0 + np.arange(self.component_count) % 3
        return weights / weights.sum()


def default_profiles(n_oems: int, shift_scale: float = 1.0) -> List[OemProfile]:
    """OEM ids start at 1. Shifts are symmetric around the middle OEM and each
    OEM also gets its own signature channel."""
    profiles = []
    half = max(1.0, (n_oems - 1) / 2.0)
    for index in range(n_oems):
        shift = np.zeros(FEATURE_COUNT)
        sign = (index - (n_oems - 1) / 2.0) / half
        shift[list(SHIFT_CHANNELS)] = sign * np.array(SHIFT_UNITS) * shift_scale
        shift[SIGNATURE_CHANNELS[index % len(SIGNATURE_CHANNELS)]] += (
            SIGNATURE_OFFSET * shift_scale
        )
        profiles.append(
            OemProfile(
                oem_id=index + 1,
                feature_shift=shift,
                component_count=6 + 2 * (index % 3),
                traffic_rate_hz=800.0 + 100.0 * (index % 3),
            )
        )
    return profiles


def gen_trace(
    profile: OemProfile, n_records: int, rng: np.random.Generator, start_us: int = 0
) -> np.ndarray:
    """Benign window of exactly n_records, timestamps nondecreasing."""
    if n_records < 1:
        raise InvalidArgumentError("n_records must be >= 1")

    parts = []
    for component, share in enumerate(profile.component_shares()):
        period = 1e6 / (profile.traffic_rate_hz * share)
        count = int(math.ceil(n_records * share * 1.5)) + 4
        k = np.arange(count)
        times = (
            start_us
            + rng.uniform(0.0, period)
            + k * period
            + rng.normal(0.0, TIMING_NOISE * period, size=count)
        )
        steps = 1 + (rng.random(count) < COUNTER_DROP_PROB)
        counters = (np.cumsum(steps) + rng.integers(16)) % 16
        phase = rng.uniform(0.0, 2 * np.pi)
        signal = 128 + 40 * np.sin(2 * np.pi * k / SIGNAL_PERIOD + phase)
        signal += rng.normal(0.0, 3.0, size=count)

        part = empty_trace(count)
        part["timestamp_us"] = np.maximum(np.rint(times), start_us).astype(np.uint64)
        part["component_id"] = component
        part["message_id"] = profile.message_id(component)
        part["payload"][:, 0] = counters
        part["payload"][:, 1] = np.clip(np.rint(signal), 0, 255)
        part["payload"][:, 7] = component
        parts.append(part)

    merged = np.concatenate(parts, dtype=TRACE_DTYPE)
    order = np.argsort(merged["timestamp_us"], kind="stable")
    return merged[order[:n_records]]


def _attack_kind(kind: Union[AttackKind, str]) -> AttackKind:
    if isinstance(kind, str):
        try:
            kind = AttackKind[kind.strip().upper()]
        except KeyError:
            raise InvalidArgumentError(f"unknown attack kind: {kind}") from None
    if kind not in ATTACK_KINDS:
        raise InvalidArgumentError(f"unknown attack kind: {kind}")
    return AttackKind(kind)


def inject_attack(
    trace: np.ndarray,
    kind: Union[AttackKind, str],
    intensity: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Return a copy of trace with ceil(intensity * len) attack records
    (at least one) inserted or, for tamper, mutated in place."""
    kind = _attack_kind(kind)
    if not 0.0 < intensity <= 1.0:
        raise InvalidArgumentError("intensity must lie in (0, 1]")
    if len(trace) == 0:
        raise InvalidArgumentError("cannot inject into an empty trace")

    trace = np.array(trace, dtype=TRACE_DTYPE)
    n_inj = max(1, math.ceil(intensity * len(trace)))
    first, last = int(trace["timestamp_us"][0]), int(trace["timestamp_us"][-1])
    components = np.unique(trace["component_id"])

    if kind == AttackKind.TAMPER:
        picked = rng.choice(len(trace), size=min(n_inj, len(trace)), replace=False)
        trace["payload"][picked, 1:] = rng.integers(0, 256, size=(len(picked), 7))
        trace["attack_tag"][picked] = int(kind)
        return trace

    injected = empty_trace(n_inj)
    injected["attack_tag"] = int(kind)
    if kind == AttackKind.DOS:
        latest = max(first, last - n_inj * DOS_GAP_US)
        start = int(rng.integers(first, latest + 1))
        stamps = start + DOS_GAP_US * np.arange(n_inj)
        injected["timestamp_us"] = np.minimum(stamps, last)
        injected["component_id"] = rng.choice(components)
        injected["message_id"] = DOS_MESSAGE_ID
        injected["payload"] = trace["payload"][rng.integers(len(trace))]
    elif kind == AttackKind.FUZZING:
        injected["timestamp_us"] = rng.integers(first, last + 1, size=n_inj)
        injected["component_id"] = rng.choice(components, size=n_inj)
        injected["message_id"] = rng.integers(0, MAX_MESSAGE_ID + 1, size=n_inj)
        injected["payload"] = rng.integers(0, 256, size=(n_inj, 8))
    else:
        target = trace[rng.integers(len(trace))]
        injected["timestamp_us"] = rng.integers(first, last + 1, size=n_inj)
        injected["component_id"] = target["component_id"]
        injected["message_id"] = target["message_id"]
        injected["payload"] = target["payload"]
        injected["payload"][:, 1] = rng.integers(0, 256, size=n_inj)

    merged = np.concatenate([trace, injected], dtype=TRACE_DTYPE)
    return merged[np.argsort(merged["timestamp_us"], kind="stable")]


@dataclass
class Fleet:
    """Per-OEM datasets, one Dataset per vehicle."""
    profiles: Dict[int, OemProfile]
    datasets: Dict[int, List[Dataset]]

    @property
    def oem_ids(self) -> List[int]:
        return sorted(self.datasets)

    def oem_dataset(self, oem_id: int) -> Dataset:
        return Dataset.concat(self.datasets[oem_id])

    def all_data(self) -> Dataset:
        return Dataset.concat([self.oem_dataset(oem) for oem in self.oem_ids])


def attacked_windows(windows: int, imbalance_ratio: float) -> int:
    return int(round(windows / (1.0 + imbalance_ratio)))


def gen_vehicle(
    profile: OemProfile,
    vehicle_index: int,
    windows: int,
    imbalance_ratio: float,
    seed: int,
    records_per_window: int = 128,
    attack_intensity: float = 0.3,
    min_intensity: float = 0.05,
) -> Tuple[Dataset, List[np.ndarray]]:
    """Windows of one vehicle: shifted feature rows plus the raw traces."""
    rng = substream(seed, "fleet", profile.oem_id, vehicle_index)
    attacked = np.zeros(windows, dtype=bool)
    n_attacked = attacked_windows(windows, imbalance_ratio)
    attacked[rng.permutation(windows)[:n_attacked]] = True

    traces, rows, labels = [], [], []
    for w in range(windows):
        trace = gen_trace(profile, records_per_window, rng)
        if attacked[w]:
            kind = ATTACK_KINDS[int(rng.integers(len(ATTACK_KINDS)))]
            intensity = float(rng.uniform(min_intensity, attack_intensity))
            trace = inject_attack(trace, kind, intensity, rng)
        vector = extract_features(trace)
        traces.append(trace)
        rows.append(vector.values + profile.feature_shift)
        labels.append(vector.label)

    counts = np.array([len(t) for t in traces], dtype=np.int64)
    return Dataset(np.array(rows), np.array(labels), counts), traces


def gen_fleet(
    n_oems: int,
    vehicles_per_oem: int,
    windows_per_vehicle: int,
    imbalance_ratio: float,
    seed: int,
    records_per_window: int = 128,
    attack_intensity: float = 0.3,
    min_intensity: float = 0.05,
    profiles: Optional[Sequence[OemProfile]] = None,
    shift_scale: float = 1.0,
) -> Fleet:
    """Deterministic per seed; every vehicle gets round(W / (1 + r)) attacked
    windows."""
    if min(n_oems, vehicles_per_oem, windows_per_vehicle) < 1:
        raise InvalidArgumentError("fleet counts must be >= 1")
    if imbalance_ratio <= 0:
        raise InvalidArgumentError("imbalance_ratio must be > 0")
    if profiles is None:
        profiles = default_profiles(n_oems, shift_scale)
    profiles = list(profiles)
    if len(profiles) != n_oems:
        raise InvalidArgumentError(
            f"{len(profiles)} OEM profiles given for n_oems={n_oems}"
        )

    datasets: Dict[int, List[Dataset]] = {}
    for profile in profiles:
        datasets[profile.oem_id] = [
            gen_vehicle(
                profile,
                v,
                windows_per_vehicle,
                imbalance_ratio,
                seed,
                records_per_window,
                attack_intensity,
                min_intensity,
            )[0]
            for v in range(vehicles_per_oem)
        ]
        Logger.debug(
            f"generated OEM {profile.oem_id}: {vehicles_per_oem} vehicles x "
            f"{windows_per_vehicle} windows"
        )
    return Fleet({p.oem_id: p for p in profiles}, datasets)


def gen_fleet_from_config(config: FleetConfig, seed: int) -> Fleet:
    return gen_fleet(
        config.n_oems,
        config.vehicles_per_oem,
        config.windows_per_vehicle,
        config.imbalance_ratio,
        seed,
        records_per_window=config.records_per_window,
        attack_intensity=config.attack_intensity,
        min_intensity=config.min_intensity,
        shift_scale=config.shift_scale,
    )


TRACE_COLUMNS = ("timestamp_us", "component_id", "message_id", "payload", "attack_tag")


def export_trace(trace: np.ndarray, path: str) -> str:
    """One record per line; payload as 16 hex digits, tag by name."""
    rows = (
        (
            int(r["timestamp_us"]),
            int(r["component_id"]),
            int(r["message_id"]),
            r["payload"].tobytes().hex(),
            enum_label(AttackKind(int(r["attack_tag"]))),
        )
        for r in trace
    )
    return write_csv(path, TRACE_COLUMNS, rows)
