#!/usr/bin/env python3
"""Shared helpers: random substreams, order statistics and CSV output.

Random streams
--------------
Every stochastic draw comes from ``substream(seed, *keys)``, a numpy
``Generator`` over the counter-based Philox4x64 bit generator whose key is
derived by ``SeedSequence([seed, *keys])``. String keys are mapped to
integers with CRC-32 so that the stream for, e.g.,
``(7, "rtt", "VSOC-5G", 100, 3)`` is the same on every platform and in every
run. Two different key tuples give statistically independent streams.
"""

from __future__ import annotations

import csv
import os
import zlib
from typing import Iterable, List, Sequence, Union

import numpy as np

from security import SecurityValidator

StreamKey = Union[int, str]


def stream_key(key: StreamKey) -> int:
    """Map a stream key to a non-negative integer."""
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if key < 0:
        raise ValueError("stream keys must be non-negative")
    return int(key)


def substream(seed: int, *keys: StreamKey) -> np.random.Generator:
    """Independent, reproducible generator for (seed, keys...)."""
    entropy = [stream_key(seed)] + [stream_key(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def percentile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation percentile (numpy's default method)."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


def format_value(value: object) -> str:
    """Stable text form for CSV cells; floats use six decimals."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    return str(value)


def write_csv(
    path: str, header: Sequence[str], rows: Iterable[Sequence[object]]
) -> str:
    """Write rows under a fixed header; returns the normalized path."""
    validated = SecurityValidator.validate_file_path(path)
    directory = os.path.dirname(validated)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(validated, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_value(cell) for cell in row])
    return validated


def read_csv(path: str) -> List[List[str]]:
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.reader(handle))
