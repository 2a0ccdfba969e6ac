"""Tests for BenchOrchestrator and its report helpers."""

from __future__ import annotations

import os
from unittest.mock import patch

import pytest

from bench_orchestrator import (
    EXIT_EXECUTION_ERROR,
    EXIT_SUCCESS,
    EXIT_UNKNOWN_PRESET,
    BenchOrchestrator,
    average_ids,
    format_table,
)
from config import Experiment, ExperimentConfig
from errors import InvalidArgumentError, StateError
from learn import Metrics
from simbench import (
    FL_POOL_COLUMNS,
    RTT_COLUMNS,
    SETUP_FL_MIX,
    SETUP_FL_SINGLE,
    SETUP_ML,
    IdsResult,
    ids_compare,
)
from utils import read_csv


def _read_bytes(path: str) -> bytes:
    with open(path, 'rb') as handle:
        return handle.read()


@pytest.mark.unit
def test_rtt_run_writes_csv_and_table(small_experiment, capsys) -> None:
    cfg = small_experiment(
        Experiment.RTT, presets=['EVSOAR-PLC100M'], payload_sizes=[100, 1500]
    )
    orchestrator = BenchOrchestrator(cfg)

    assert orchestrator.run() == EXIT_SUCCESS
    path = os.path.join(cfg.output_dir, 'rtt.csv')
    assert orchestrator.written == [os.path.normpath(path)]
    rows = read_csv(path)
    assert rows[0] == list(RTT_COLUMNS)
    assert [r[:3] for r in rows[1:]] == [
        ['EVSOAR-PLC100M', '100', '5'],
        ['EVSOAR-PLC100M', '1500', '5'],
    ]
    assert 'median_rtt_ms' in capsys.readouterr().out


@pytest.mark.unit
def test_seeds_are_consecutive(small_experiment) -> None:
    cfg = small_experiment(Experiment.FL_POOLS, seed=3, seeds=3)
    assert BenchOrchestrator(cfg).seeds == [3, 4, 5]


@pytest.mark.unit
def test_same_seed_gives_identical_reports(small_experiment, tmp_path) -> None:
    outputs = []
    for name in ('first', 'second'):
        cfg = small_experiment(
            Experiment.STABILITY,
            presets=['VSOC-4G', 'RSU-WiFi'],
            output_dir=str(tmp_path / name),
        )
        assert BenchOrchestrator(cfg).run() == EXIT_SUCCESS
        outputs.append(_read_bytes(os.path.join(cfg.output_dir, 'stability.csv')))
    assert outputs[0] == outputs[1]


@pytest.mark.unit
def test_response_reports_are_byte_identical(small_experiment, tmp_path) -> None:
    outputs = []
    for name in ('first', 'second'):
        cfg = small_experiment(
            Experiment.RESPONSE_SCENARIO,
            presets=['EVSOAR-PLC100M', 'VSOC-5G'],
            seeds=2,
            output_dir=str(tmp_path / name),
        )
        assert BenchOrchestrator(cfg).run() == EXIT_SUCCESS
        outputs.append(
            _read_bytes(os.path.join(cfg.output_dir, 'response-scenario.csv'))
        )
    assert outputs[0] == outputs[1]
    lines = outputs[0].decode('utf-8').splitlines()
    assert len(lines) == 1 + 2 * 2
    assert lines[1].startswith('EVSOAR-PLC100M,0,')


@pytest.mark.unit
def test_unknown_preset_returns_20(small_experiment) -> None:
    cfg = small_experiment(Experiment.RTT, presets=['VSOC-6G'])
    assert BenchOrchestrator(cfg).run() == EXIT_UNKNOWN_PRESET == 20


@pytest.mark.unit
def test_simulation_errors_return_1(small_experiment) -> None:
    cfg = small_experiment(Experiment.RTT, presets=['EVSOAR-PLC10M'])
    with patch('bench_orchestrator.rtt_rows', side_effect=StateError('boom')):
        assert BenchOrchestrator(cfg).run() == EXIT_EXECUTION_ERROR == 1
    with patch('bench_orchestrator.rtt_rows', side_effect=RuntimeError('bug')):
        assert BenchOrchestrator(cfg).run() == EXIT_EXECUTION_ERROR


@pytest.mark.unit
def test_no_report_is_written_on_failure(small_experiment) -> None:
    cfg = small_experiment(Experiment.RTT, presets=['VSOC-6G'])
    orchestrator = BenchOrchestrator(cfg)
    orchestrator.run()
    assert orchestrator.written == []
    assert not os.path.exists(orchestrator.report_path())


@pytest.mark.unit
def test_average_ids_means_rates_and_sums_supports() -> None:
    first = IdsResult(
        {'ML': Metrics(1.0, 0.5, 0.9, 30, 6)}, {'ML': 1000}, test_size=36
    )
    second = IdsResult(
        {'ML': Metrics(0.8, 0.7, 0.7, 31, 5)}, {'ML': 1001}, test_size=36
    )
    merged = average_ids([first, second])

    metrics = merged.metrics['ML']
    assert metrics.recall_class0 == pytest.approx(0.9)
    assert metrics.recall_class1 == pytest.approx(0.6)
    assert metrics.accuracy == pytest.approx(0.8)
    assert (metrics.support0, metrics.support1) == (61, 11)
    assert merged.payload_bytes == {'ML': 1000}
    assert merged.test_size == 72


@pytest.mark.unit
def test_format_table_aligns_columns() -> None:
    text = format_table(('preset', 'ms'), [('VSOC-5G', 17.5), ('Cloud', 0.3)])
    assert text.splitlines() == [
        'preset   ms       ',
        '-------  ---------',
        'VSOC-5G  17.500000',
        'Cloud    0.300000 ',
    ]


@pytest.mark.slow
def test_fl_pools_report_covers_every_seed(small_experiment) -> None:
    cfg = small_experiment(Experiment.FL_POOLS, seeds=2)
    assert BenchOrchestrator(cfg).run() == EXIT_SUCCESS
    rows = read_csv(os.path.join(cfg.output_dir, 'fl-pools.csv'))
    assert rows[0] == list(FL_POOL_COLUMNS)
    assert {r[0] for r in rows[1:]} == {'0', '1'}
    assert len(rows) == 1 + 2 * 8


@pytest.mark.slow
def test_ids_compare_report(small_experiment) -> None:
    cfg = small_experiment(Experiment.IDS_COMPARE)
    assert BenchOrchestrator(cfg).run() == EXIT_SUCCESS
    rows = read_csv(os.path.join(cfg.output_dir, 'ids-compare.csv'))
    assert [r[0] for r in rows[1:]] == [
        'ML', 'ML', 'FL-single', 'FL-single', 'FL-mix', 'FL-mix'
    ]


@pytest.mark.unit
@pytest.mark.parametrize(
    'experiment', [Experiment.RTT, Experiment.THROUGHPUT, Experiment.STABILITY]
)
def test_link_benchmarks_refuse_several_seeds(small_experiment, experiment) -> None:
    with pytest.raises(InvalidArgumentError, match='one seed'):
        small_experiment(experiment, seeds=2)


@pytest.mark.slow
def test_default_fleet_keeps_the_detection_ordering(tmp_path) -> None:
    """Five seeds on the default fleet: centralized >= mixed federated >= 0.80,
    mixing helps attack recall and benign recall leads for the central model."""
    cfg = ExperimentConfig(Experiment.IDS_COMPARE, seeds=5, output_dir=str(tmp_path))
    orchestrator = BenchOrchestrator(cfg)
    assert orchestrator.seeds == [0, 1, 2, 3, 4]
    metrics = average_ids(
        [ids_compare(cfg, seed) for seed in orchestrator.seeds]
    ).metrics

    ml, single, mix = metrics[SETUP_ML], metrics[SETUP_FL_SINGLE], metrics[SETUP_FL_MIX]
    assert ml.accuracy >= mix.accuracy >= 0.80
    assert mix.recall_class1 >= single.recall_class1
    assert ml.recall_class0 >= ml.recall_class1
