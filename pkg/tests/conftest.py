from __future__ import annotations

import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from surgsim.scenario_runner import parse_scenario, run_scenario  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
DEMO = SCENARIOS / "cholecystectomy_demo" / "scenario.yaml"
RIGID = SCENARIOS / "unit_rigid_flow" / "scenario.yaml"
MINIMAL = SCENARIOS / "unit_minimal" / "scenario.yaml"

# Acceptance verdicts, printed as one line each at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session", autouse=True)
def _no_output_root(tmp_path_factory):
    # Runs below pass absolute paths; keep a user's SURGSIM_OUTPUT_ROOT from leaking in.
    old = os.environ.pop("SURGSIM_OUTPUT_ROOT", None)
    yield
    if old is not None:
        os.environ["SURGSIM_OUTPUT_ROOT"] = old


def _run(path, out, **kw):
    sc = parse_scenario(path)
    return sc, run_scenario(sc, out_dir=out, **kw)


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_a")
    sc, res = _run(DEMO, out)
    return sc, res, out


@pytest.fixture(scope="session")
def demo_run_repeat(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_b")
    sc, res = _run(DEMO, out)
    return sc, res, out


@pytest.fixture(scope="session")
def rigid_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("rigid")
    sc, res = _run(RIGID, out)
    return sc, res, out


@pytest.fixture(scope="session")
def minimal_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("minimal")
    sc, res = _run(MINIMAL, out)
    return sc, res, out
