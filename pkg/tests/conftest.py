import time

import numpy as np
import pytest

from brimpr_lab.model import ModelConfig
from brimpr_lab.synthdata import TaskSpec, pretrain_source

_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion, printed in the terminal summary."""
    def log(criterion: str, ok: bool, detail: str) -> None:
        _LINES.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
    return log


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def pretrained():
    """seed -> (PretrainResult, seconds); default task and model, 20 epochs, built once per session."""
    cache = {}

    def get(seed: int):
        if seed not in cache:
            t0 = time.perf_counter()
            res = pretrain_source(ModelConfig(), TaskSpec(), 20, np.random.default_rng(seed))
            cache[seed] = (res, time.perf_counter() - t0)
        return cache[seed]
    return get
