from __future__ import annotations

import copy
import shutil
from pathlib import Path

import pytest
import yaml

ROOT = Path(__file__).resolve().parents[1]
EXPERIMENTS = ROOT / "experiments"
SAMPLE = EXPERIMENTS / "recommendation-loss.yml"
COMPOSE = EXPERIMENTS / "docker-compose.yml"

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def sample_doc() -> dict:
    return yaml.safe_load(SAMPLE.read_text())


def write_experiment(directory: Path, doc: dict, name: str = "experiment.yml") -> Path:
    """Write ``doc`` next to a copy of the sample compose file."""
    directory.mkdir(parents=True, exist_ok=True)
    if not (directory / COMPOSE.name).exists():
        shutil.copy(COMPOSE, directory / COMPOSE.name)
    path = directory / name
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def variant(**changes) -> dict:
    """The sample experiment with top-level experiment sections replaced."""
    doc = copy.deepcopy(sample_doc())
    doc["experiment"].update(changes)
    return doc


def treatment(name: str, action: str, **params) -> dict:
    return {name: {"action": action, "params": params}}


@pytest.fixture
def criterion():
    """Record an acceptance criterion outcome for the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        _CRITERIA[number] = (title, bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")


def sim_runtime(seed: int = 0, exclude=("loadgenerator",), env: dict | None = None, topology=None):
    """A started simulated SUE built from the sample compose file."""
    from oxn.clock import VirtualClock
    from oxn.orchestration import Journal, filter_services, load_compose, start
    from oxn.orchestration.lifecycle import create_runtime

    clock = VirtualClock()
    model = filter_services(load_compose(COMPOSE), exclude=exclude)
    for (service, key), value in (env or {}).items():
        model.services[service].environment[key] = value
    runtime = create_runtime(model, "sim", clock=clock, journal=Journal(clock), entry="frontend", seed=seed,
                             topology=topology)
    handle = start(model, runtime=runtime)
    return runtime, handle
