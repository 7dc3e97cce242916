"""Shared fixtures: small instances of the reference microgrid."""

from dataclasses import replace

import numpy as np
import pytest

from hybrid_dispatch.core import MicrogridConfig, build_ldes_hull, default_config
from hybrid_dispatch.scenarios import ScenarioSeries, SyntheticGenConfig, synthesize_scenarios


def relaxed_contract(config: MicrogridConfig, target: float | None = None) -> MicrogridConfig:
    """Same microgrid with the final-SoC target at (or near) the initial SoC."""
    ld = config.ldes
    return replace(config, ldes=replace(ld, soc_final_target=ld.soc_init if target is None else target))


@pytest.fixture(scope="session")
def config():
    return default_config()


@pytest.fixture(scope="session")
def short_config(config):
    """Contract target equal to the initial LDES SoC so short horizons stay feasible."""
    return relaxed_contract(config)


@pytest.fixture(scope="session")
def hull(config):
    return build_ldes_hull(config.ldes, 10)


@pytest.fixture(scope="session")
def week_gen():
    return SyntheticGenConfig(seed=11, horizon=168, noise_level=0.05, level_spread=0.15)


@pytest.fixture(scope="session")
def week_scenarios(week_gen):
    return synthesize_scenarios(week_gen, 5)


def flat_scenario(T: int, load: float, renewable: float, sid: str = "flat") -> ScenarioSeries:
    return ScenarioSeries(sid, np.full(T, float(load)), np.full(T, float(renewable)))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
