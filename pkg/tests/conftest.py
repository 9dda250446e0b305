"""Session-wide trained models for the slow and acceptance tests.

The desk models are trained once per session at the default configuration
and shared; per-seed classifiers are trained on first request. Stage wall
times are kept so pipeline budgets can be checked against real compute.
"""
import time

import pytest

from dive.config import ExperimentConfig
from dive.experiments import train_seed_classifiers, train_shared

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_config() -> ExperimentConfig:
    return ExperimentConfig(seeds=(0, 1, 2, 3, 4)).validate()


@pytest.fixture(scope="session")
def desk(desk_config):
    return train_shared(desk_config, desk_config.seeds[0], ood=True)


class SeedClassifiers:
    def __init__(self, cfg):
        self.cfg = cfg
        self.models: dict[int, dict] = {}
        self.seconds: dict[int, float] = {}

    def __call__(self, seed: int) -> dict:
        if seed not in self.models:
            t = time.perf_counter()
            self.models[seed] = train_seed_classifiers(self.cfg, seed)
            self.seconds[seed] = time.perf_counter() - t
        return self.models[seed]


@pytest.fixture(scope="session")
def classifiers(desk_config):
    return SeedClassifiers(desk_config)
