#!/usr/bin/env python3
"""Point-to-point link emulation.

A transfer is split into MTU-sized packets. Its delivery time is

    latency + sum(serialization) + sum(retransmission delay) + jitter

where every packet is lost independently with probability ``plr`` and each
lost copy costs one retransmission timeout (``2 * latency + 10 ms``) plus its
own serialization time; loss never aborts a transfer. Jitter is one draw per
non-empty transfer, taken for the arrival of its last packet. Zero-byte
transfers carry no packets and take exactly ``latency``.

All functions are pure functions of their arguments and the random stream
they are handed; experiment-level helpers derive one substream per transfer
with ``utils.substream``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from config import JitterKind
from errors import InvalidArgumentError, UnknownPresetError
from logging_utils import Logger
from security import SecurityValidator
from utils import substream

MTU_BYTES = 1500
RTO_EXTRA_MS = 10.0
STABILITY_PACKET_BYTES = 1500


@dataclass(frozen=True)
class JitterModel:
    """Per-transfer delay variation.

    wired:    uniform[0, wired_max_ms]
    wireless: uniform[0, wireless_base_ms] plus, with probability spike_prob,
              a Pareto spike (scale wireless_scale_ms, shape wireless_shape)
              truncated at spike_cap_ms
    """
    kind: JitterKind = JitterKind.WIRED
    wired_max_ms: float = 2.0
    wireless_base_ms: float = 20.0
    wireless_scale_ms: float = 100.0
    wireless_shape: float = 1.5
    spike_prob: float = 0.15
    spike_cap_ms: float = 5000.0

    def __post_init__(self) -> None:
        numeric = (
            self.wired_max_ms,
            self.wireless_base_ms,
            self.wireless_scale_ms,
            self.wireless_shape,
            self.spike_cap_ms,
        )
        if any(value < 0 for value in numeric):
            raise InvalidArgumentError("jitter parameters must be >= 0")
        if not 0.0 <= self.spike_prob <= 1.0:
            raise InvalidArgumentError("spike_prob must lie in [0, 1]")

    @classmethod
    def off(cls) -> "JitterModel":
        return cls(kind=JitterKind.WIRED, wired_max_ms=0.0)

    @classmethod
    def wireless(cls, **overrides: float) -> "JitterModel":
        return cls(kind=JitterKind.WIRELESS, **overrides)

    @property
    def enabled(self) -> bool:
        if self.kind == JitterKind.WIRED:
            return self.wired_max_ms > 0
        spikes = self.spike_prob > 0 and self.wireless_scale_ms > 0
        return self.wireless_base_ms > 0 or spikes

    def draw(self, rng: np.random.Generator) -> float:
        if not self.enabled:
            return 0.0
        if self.kind == JitterKind.WIRED:
            return float(rng.uniform(0.0, self.wired_max_ms))
        jitter = float(rng.uniform(0.0, self.wireless_base_ms))
        if rng.random() < self.spike_prob:
            # numpy's pareto is the Lomax form; shift by one for the classic tail
            spike = self.wireless_scale_ms * (1.0 + rng.pareto(self.wireless_shape))
            jitter += min(float(spike), self.spike_cap_ms)
        return jitter


@dataclass(frozen=True)
class LinkConfig:
    """One row of the link table."""
    name: str
    bandwidth_mbps: float
    latency_ms: float
    plr: float
    jitter: JitterModel = field(default_factory=JitterModel)

    def __post_init__(self) -> None:
        if self.bandwidth_mbps <= 0:
            raise InvalidArgumentError(f"{self.name}: bandwidth must be > 0")
        if self.latency_ms < 0:
            raise InvalidArgumentError(f"{self.name}: latency must be >= 0")
        if not 0.0 <= self.plr < 1.0:
            raise InvalidArgumentError(f"{self.name}: plr must lie in [0, 1)")

    @property
    def rto_ms(self) -> float:
        return 2.0 * self.latency_ms + RTO_EXTRA_MS

    def serialization_ms(self, payload_bytes: int) -> float:
        return payload_bytes * 8 / (self.bandwidth_mbps * 1e3)


@dataclass(frozen=True)
class TransferResult:
    total_ms: float
    packets_sent: int
    packets_lost: int
    jitter_ms: float


def deterministic(link: LinkConfig) -> LinkConfig:
    """Same link with no loss and no jitter."""
    return replace(link, plr=0.0, jitter=JitterModel.off())


def packet_count(payload_bytes: int) -> int:
    return math.ceil(payload_bytes / MTU_BYTES)


def transfer_time(
    link: LinkConfig, payload_bytes: int, rng: np.random.Generator
) -> TransferResult:
    """One-way delivery time of a payload over the link."""
    if payload_bytes < 0:
        raise InvalidArgumentError("payload_bytes must be >= 0")

    packets = packet_count(payload_bytes)
    serialization = link.serialization_ms(payload_bytes)
    if packets == 0:
        return TransferResult(link.latency_ms, 0, 0, 0.0)

    lost = 0
    retransmission = 0.0
    if link.plr > 0:
        # failures before the first successful copy, per packet
        losses = rng.geometric(1.0 - link.plr, size=packets) - 1
        lost = int(losses.sum())
        if lost:
            last_bytes = payload_bytes - (packets - 1) * MTU_BYTES
            lost_full = lost - int(losses[-1])
            retransmission = (
                lost * link.rto_ms
                + lost_full * link.serialization_ms(MTU_BYTES)
                + int(losses[-1]) * link.serialization_ms(last_bytes)
            )

    jitter = link.jitter.draw(rng)
    total = link.latency_ms + serialization + retransmission + jitter
    return TransferResult(total, packets + lost, lost, jitter)


def round_trip(
    link: LinkConfig, request_bytes: int, reply_bytes: int, rng: np.random.Generator
) -> float:
    """Request transfer plus reply transfer over the same link."""
    forward = transfer_time(link, request_bytes, rng)
    reply = transfer_time(link, reply_bytes, rng)
    return forward.total_ms + reply.total_ms


def median_rtt(link: LinkConfig, payload_bytes: int, n_trials: int, seed: int) -> float:
    """Median of independent request/zero-byte-reply round trips."""
    if n_trials < 1:
        raise InvalidArgumentError("n_trials must be >= 1")
    samples = [
        round_trip(
            link, payload_bytes, 0, substream(seed, "rtt", link.name, payload_bytes, i)
        )
        for i in range(n_trials)
    ]
    return float(np.median(samples))


def median_transfer(
    link: LinkConfig, payload_bytes: int, n_trials: int, seed: int
) -> float:
    if n_trials < 1:
        raise InvalidArgumentError("n_trials must be >= 1")
    samples = [
        transfer_time(
            link,
            payload_bytes,
            substream(seed, "throughput", link.name, payload_bytes, i),
        ).total_ms
        for i in range(n_trials)
    ]
    return float(np.median(samples))


def measured_throughput(
    link: LinkConfig, payload_bytes: int, n_trials: int, seed: int
) -> float:
    """Goodput in Mbps: payload bits over the median one-way transfer time."""
    if payload_bytes < 1:
        raise InvalidArgumentError("payload_bytes must be >= 1")
    elapsed_ms = median_transfer(link, payload_bytes, n_trials, seed)
    return payload_bytes * 8 / (elapsed_ms * 1e3)


def stability_series(
    link: LinkConfig, duration_s: int, seed: int
) -> List[Tuple[int, float]]:
    """Delivery time of one full packet per second for duration_s seconds."""
    if duration_s < 1:
        raise InvalidArgumentError("duration_s must be >= 1")
    series = []
    for t in range(duration_s):
        rng = substream(seed, "stability", link.name, t)
        series.append((t, transfer_time(link, STABILITY_PACKET_BYTES, rng).total_ms))
    return series


PLC_PRESETS = ("EVSOAR-PLC10M", "EVSOAR-PLC100M", "EVSOAR-PLC1G")
WIRELESS_PRESETS = ("VSOC-4G", "VSOC-5G", "RSU-WiFi")
CENTRAL_LINK = "Cloud"
PRESETS_FILE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "presets.yaml")


def _jitter_from_entry(entry: object, models: Dict[str, JitterModel]) -> JitterModel:
    if entry is None:
        return JitterModel()
    if isinstance(entry, str):
        if entry == "off":
            return JitterModel.off()
        if entry not in models:
            raise InvalidArgumentError(f"unknown jitter model: {entry}")
        return models[entry]
    if isinstance(entry, dict):
        params = dict(entry)
        kind = JitterKind(params.pop("kind", JitterKind.WIRED.value))
        return JitterModel(kind=kind, **params)
    raise InvalidArgumentError(f"invalid jitter entry: {entry!r}")


def parse_presets(document: dict) -> Dict[str, LinkConfig]:
    """Build presets from a parsed YAML document."""
    models: Dict[str, JitterModel] = {}
    for name, params in (document.get("jitter_models") or {}).items():
        params = dict(params or {})
        kind = JitterKind(params.pop("kind", name))
        models[name] = JitterModel(kind=kind, **params)

    presets: Dict[str, LinkConfig] = {}
    for name, row in (document.get("presets") or {}).items():
        SecurityValidator.validate_preset_name(name)
        presets[name] = LinkConfig(
            name=name,
            bandwidth_mbps=float(row["bandwidth_mbps"]),
            latency_ms=float(row["latency_ms"]),
            plr=float(row.get("plr", 0.0)),
            jitter=_jitter_from_entry(row.get("jitter"), models),
        )
    return presets


def load_presets(path: Optional[str] = None) -> Dict[str, LinkConfig]:
    """Presets from a YAML link table; the shipped presets.yaml by default."""
    validated = SecurityValidator.validate_file_path(path or PRESETS_FILE)
    with open(validated, encoding="utf-8") as handle:
        document = yaml.safe_load(handle) or {}
    presets = parse_presets(document)
    Logger.debug(f"loaded {len(presets)} link presets from {validated}")
    return presets


PRESETS: Dict[str, LinkConfig] = load_presets()


def get_preset(
    name: str, presets: Optional[Dict[str, LinkConfig]] = None
) -> LinkConfig:
    table = PRESETS if presets is None else presets
    if name not in table:
        raise UnknownPresetError(
            f"unknown preset '{name}' (known: {', '.join(sorted(table))})"
        )
    return table[name]
