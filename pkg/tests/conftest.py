"""Pytest configuration for evsoar-sim tests."""

import os
import sys

import pytest

PROJECT_ROOT = os.path.dirname(os.path.dirname(__file__))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from config import (  # noqa: E402
    CentralConfig,
    Experiment,
    ExperimentConfig,
    FederatedConfig,
    FleetConfig,
)
from logging_utils import Logger  # noqa: E402


@pytest.fixture(autouse=True)
def quiet_logger():
    """Keep info/debug chatter out of test output."""
    Logger.quiet()
    yield
    Logger.set_verbose(False)


@pytest.fixture
def small_fleet() -> FleetConfig:
    return FleetConfig(n_oems=3, vehicles_per_oem=2, windows_per_vehicle=40)


@pytest.fixture
def small_experiment(tmp_path, small_fleet):
    """Factory for cheap experiment configs writing under tmp_path."""

    def make(experiment: Experiment, **changes) -> ExperimentConfig:
        values = dict(
            experiment=experiment,
            trials=5,
            duration_s=10,
            output_dir=str(tmp_path / 'results'),
            fleet=small_fleet,
            federated=FederatedConfig(layer_sizes=(16, 8, 1), rounds=2, local_epochs=1),
            central=CentralConfig(rounds=20),
        )
        values.update(changes)
        return ExperimentConfig(**values)

    return make
