import copy
import time

import numpy as np
import pytest
from hypothesis import settings

from tdsm_lab import config as C
from tdsm_lab import gmm_oracle as oracle
from tdsm_lab.cli import train_all
from tdsm_lab.label_noise import TransitionMatrix, REVERSE

settings.register_profile("lab", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("lab")

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def gmm():
    return oracle.toy_mixture()


@pytest.fixture(scope="session")
def sched():
    return oracle.VESchedule()


@pytest.fixture(scope="session")
def S():
    return TransitionMatrix(oracle.TOY_REVERSE, REVERSE)


def toy_config(**sections) -> dict:
    cfg = copy.deepcopy(C.DEFAULTS)
    for key, value in sections.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    C.validate(cfg)
    return cfg


class ToyRuns:
    """Trains toy score models on demand and keeps them for the session."""

    def __init__(self):
        self._cache = {}
        self.seconds = {}

    def get(self, kind: str, seed: int, **overrides):
        key = (kind, seed, tuple(sorted((k, repr(v)) for k, v in overrides.items())))
        if key not in self._cache:
            extra = dict(overrides)
            objective = {"kind": kind, **extra.pop("objective", {})}
            cfg = toy_config(seed=seed, objective=objective, **extra)
            t0 = time.perf_counter()
            art = train_all(cfg)
            self.seconds[key] = time.perf_counter() - t0
            art["config"] = cfg
            self._cache[key] = art
        return self._cache[key]

    def seconds_for(self, kind: str, seed: int, **overrides) -> float:
        self.get(kind, seed, **overrides)
        key = (kind, seed, tuple(sorted((k, repr(v)) for k, v in overrides.items())))
        return self.seconds[key]


@pytest.fixture(scope="session")
def toy_runs():
    return ToyRuns()


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))
