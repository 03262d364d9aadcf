from __future__ import annotations

import pytest

from specroute.core import default_config
from specroute.synthmodels import (
    Calibration,
    build_synthetic_stack,
    fit_calibration,
    load_reference_table,
)


@pytest.fixture(scope="session")
def reference_table():
    return load_reference_table()


@pytest.fixture(scope="session")
def calibration(reference_table) -> Calibration:
    cal, _, _ = fit_calibration(reference_table)
    return cal


@pytest.fixture(scope="session")
def latency_report(reference_table):
    _, report, _ = fit_calibration(reference_table)
    return report


@pytest.fixture(scope="session")
def quality_report(reference_table):
    _, _, report = fit_calibration(reference_table)
    return report


@pytest.fixture()
def config():
    return default_config()


@pytest.fixture()
def stack(calibration, config):
    return build_synthetic_stack(calibration, config)
