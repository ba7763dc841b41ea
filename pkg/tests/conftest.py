import time

import pytest

from uniquant.harness import AblationPreset, desk_config, desk_problem, run_baseline

SEEDS = (0, 1, 2)
DESK_RUNS = (
    ("flexround", AblationPreset.FULL),
    ("alternating", AblationPreset.FULL),
    ("alternating-star", AblationPreset.FULL),
    ("uniquanf", AblationPreset.FULL),
    ("uniquanf", AblationPreset.NO_REMAPPING),
)

_criteria = {}


def run_desk_matrix():
    """Every desk run on every seed: {(seed, method, preset): (Report, BlockResult)}."""
    out = {}
    start = time.perf_counter()
    for seed in SEEDS:
        block, data = desk_problem(seed)
        for method, preset in DESK_RUNS:
            cfg = desk_config(seed, record_trace=(method == "uniquanf"))
            results = []
            report = run_baseline(method, block, data, cfg, preset, result_out=results)
            out[seed, method, preset.value] = (report, results[0])
    return out, time.perf_counter() - start


@pytest.fixture(scope="session")
def desk_matrix():
    return run_desk_matrix()


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    def record(n, ok, detail):
        _criteria[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
