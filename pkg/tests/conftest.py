from __future__ import annotations

import os

import pytest
from hypothesis import settings

from helpers import OVERFIT_TRAIN, toy_scenes
from relmo.model import ModelConfig
from relmo.training import train

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# results per acceptance criterion, echoed as one line each in the terminal summary
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def acceptance_line(number: int) -> str:
    parts = ACCEPTANCE[number]
    status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
    return f"criterion {number:2d} {status}: " + "; ".join(d for _, d in parts)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(acceptance_line(k))


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))
        print(acceptance_line(number))

    return record


_RUNS: dict = {}


@pytest.fixture(scope="session")
def overfit_run():
    """Train the toy model on the fixed 8-scene set; memoised per ablation variant."""

    def run(**flags):
        key = tuple(sorted(flags.items()))
        if key not in _RUNS:
            import time

            config = ModelConfig.toy(**flags)
            scenes = toy_scenes(8, config=config)
            start = time.perf_counter()
            state = train(scenes, config, OVERFIT_TRAIN)
            _RUNS[key] = (config, scenes, state, time.perf_counter() - start)
        return _RUNS[key]

    return run
