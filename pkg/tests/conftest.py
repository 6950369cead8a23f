"""
Pytest configuration and fixtures for HATK tests.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))


# Configure pytest
def pytest_configure(config):
    """Configure pytest"""
    config.addinivalue_line("markers", "unit: unit tests for single components")
    config.addinivalue_line("markers", "integration: tests spanning several modules or the CLI")
    config.addinivalue_line("markers", "slow: slow tests")
    config.addinivalue_line("markers", "acceptance: published-value and oracle acceptance checks")


@pytest.fixture(scope="session")
def test_config():
    """Session-level test configuration"""
    return {
        'test_dir': Path(__file__).parent,
        'project_root': project_root,
    }


@pytest.fixture
def rng():
    """Seeded generator; every test gets the same stream"""
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def isolated_runtime(tmp_path, monkeypatch):
    """Keep event logs and metrics of each test apart"""
    from telemetry.logger import set_event_log
    from telemetry.prometheus_metrics import reset_metrics

    set_event_log(str(tmp_path / "logs" / "events.log"))
    monkeypatch.setenv("HATK_THREADS", "2")
    reset_metrics()
    yield
    set_event_log(None)
    reset_metrics()

# Markers for running specific test categories
# pytest -m acceptance  - run acceptance tests only
# pytest -m "not slow"  - skip slow tests
