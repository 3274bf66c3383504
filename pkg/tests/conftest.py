import json
from pathlib import Path

import pytest

from sllmsim.config import SimConfig, parse_cluster_config
from sllmsim.trace import TraceRecord, parse_trace_line

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_path(name: str) -> Path:
    return FIXTURES / name


def parse_trace_lines(lines: list[str]) -> list[TraceRecord]:
    return [parse_trace_line(line, i + 1) for i, line in enumerate(lines)]


@pytest.fixture(scope="session")
def scenario_timelines() -> dict:
    with open(fixture_path("scenario_timelines.json"), encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def scenario_config_text() -> str:
    return fixture_path("two_server_scenario.txt").read_text(encoding="utf-8")


@pytest.fixture
def scenario_cfg(scenario_config_text: str) -> SimConfig:
    # Fresh parse per test: build_cluster hands out mutable state.
    return parse_cluster_config(scenario_config_text, source="two_server_scenario.txt")


@pytest.fixture
def scenario_trace(scenario_timelines: dict) -> list[TraceRecord]:
    return parse_trace_lines(scenario_timelines["trace"])
