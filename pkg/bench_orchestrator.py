#!/usr/bin/env python3
"""Runs one configured experiment, writes its CSV report and a summary table."""

from __future__ import annotations

import os
import sys
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from config import Experiment, ExperimentConfig
from errors import EvsoarError, UnknownPresetError
from learn import Metrics
from logging_utils import Logger
from simbench import (
    FL_POOL_COLUMNS,
    IDS_COLUMNS,
    RESPONSE_COLUMNS,
    RTT_COLUMNS,
    STABILITY_COLUMNS,
    THROUGHPUT_COLUMNS,
    IdsResult,
    fl_pool_rows,
    fl_pools,
    ids_compare,
    ids_rows,
    resolve_links,
    response_rows,
    response_scenario,
    rtt_rows,
    stability_rows,
    throughput_rows,
)
from utils import format_value, write_csv

# Exit codes
EXIT_SUCCESS = 0
EXIT_EXECUTION_ERROR = 1
EXIT_UNKNOWN_PRESET = 20

Rows = List[Sequence[object]]


def average_ids(results: Sequence[IdsResult]) -> IdsResult:
    """Seed-averaged recalls, accuracy and payload; supports are summed."""
    first = results[0]
    metrics: Dict[str, Metrics] = {}
    for setup in first.metrics:
        parts = [r.metrics[setup] for r in results]
        metrics[setup] = Metrics(
            recall_class0=float(np.mean([m.recall_class0 for m in parts])),
            recall_class1=float(np.mean([m.recall_class1 for m in parts])),
            accuracy=float(np.mean([m.accuracy for m in parts])),
            support0=sum(m.support0 for m in parts),
            support1=sum(m.support1 for m in parts),
        )
    payload = {
        setup: int(round(np.mean([r.payload_bytes[setup] for r in results])))
        for setup in first.payload_bytes
    }
    return IdsResult(metrics, payload, [], sum(r.test_size for r in results))


def format_table(header: Sequence[str], rows: Rows) -> str:
    """Plain fixed-width text table."""
    cells = [list(header)] + [[format_value(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


class BenchOrchestrator:
    def __init__(self, cfg: ExperimentConfig) -> None:
        self.cfg = cfg
        self.written: List[str] = []
        self._runners: Dict[Experiment, Callable[[], Tuple[Sequence[str], Rows]]] = {
            Experiment.RTT: self._rtt,
            Experiment.THROUGHPUT: self._throughput,
            Experiment.STABILITY: self._stability,
            Experiment.IDS_COMPARE: self._ids_compare,
            Experiment.FL_POOLS: self._fl_pools,
            Experiment.RESPONSE_SCENARIO: self._response,
        }

    @property
    def seeds(self) -> List[int]:
        return [self.cfg.seed + i for i in range(self.cfg.seeds)]

    def run(self) -> int:
        name = self.cfg.experiment.value
        try:
            Logger.info(f"running {name} (seeds {self.seeds[0]}..{self.seeds[-1]})")
            header, rows = self._runners[self.cfg.experiment]()
            path = write_csv(self.report_path(), header, rows)
            self.written.append(path)
            sys.stdout.write(format_table(header, rows) + "\n")
            Logger.info(f"{name}: {len(rows)} rows written to {path}")
            return EXIT_SUCCESS
        except UnknownPresetError as e:
            Logger.error(f"error: {e}")
            return EXIT_UNKNOWN_PRESET
        except EvsoarError as e:
            Logger.error(f"{name} failed: {e}")
            return EXIT_EXECUTION_ERROR
        except Exception as e:
            Logger.error(f"unexpected error: {e}")
            return EXIT_EXECUTION_ERROR

    def report_path(self) -> str:
        return os.path.join(self.cfg.output_dir, f"{self.cfg.experiment.value}.csv")

    def _rtt(self) -> Tuple[Sequence[str], Rows]:
        links = resolve_links(self.cfg)
        return RTT_COLUMNS, list(
            rtt_rows(links, self.cfg.payload_sizes, self.cfg.trials, self.cfg.seed)
        )

    def _throughput(self) -> Tuple[Sequence[str], Rows]:
        links = resolve_links(self.cfg)
        return THROUGHPUT_COLUMNS, list(
            throughput_rows(
                links, self.cfg.payload_sizes, self.cfg.trials, self.cfg.seed
            )
        )

    def _stability(self) -> Tuple[Sequence[str], Rows]:
        links = resolve_links(self.cfg)
        return STABILITY_COLUMNS, list(
            stability_rows(links, self.cfg.duration_s, self.cfg.seed)
        )

    def _ids_results(self) -> List[IdsResult]:
        results = []
        for index, seed in enumerate(self.seeds, start=1):
            Logger.info(f"[{index}/{len(self.seeds)}] ids-compare seed {seed}")
            results.append(ids_compare(self.cfg, seed))
        return results

    def _ids_compare(self) -> Tuple[Sequence[str], Rows]:
        return IDS_COLUMNS, list(ids_rows(average_ids(self._ids_results())))

    def _fl_pools(self) -> Tuple[Sequence[str], Rows]:
        rows: Rows = []
        for seed in self.seeds:
            rows.extend(fl_pool_rows(fl_pools(self.cfg, seed), seed))
        return FL_POOL_COLUMNS, rows

    def _response(self) -> Tuple[Sequence[str], Rows]:
        links = resolve_links(self.cfg)
        rows: Rows = []
        for seed in self.seeds:
            rows.extend(response_rows(response_scenario(self.cfg, seed, links), seed))
        return RESPONSE_COLUMNS, rows
