"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from clip_rpn.backbone import BackboneConfig

# Criterion verdict lines from test_acceptance.py. They are printed live to the
# unbuffered stdout, which pytest's default fd capture swallows on passing
# tests, so they are replayed in a terminal-summary section as well.
_VERDICTS = []


def record_verdict(line):
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest legal backbone; keeps unit tests fast on CPU."""
    return BackboneConfig(
        level_channels=(8, 16, 24, 32),
        blocks_per_level=(1, 1, 1, 1),
        heads_per_level=(1, 2, 4, 8),
        n_subnets=2,
        window_size=8,
    )


def random_image(rng, height=24, width=24):
    return rng.uniform(0.0, 1.0, size=(height, width, 3))
