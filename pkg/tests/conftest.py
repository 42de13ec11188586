import json
import time
from pathlib import Path

import pytest

from coexplore import hwmodel as hm
from coexplore.surrogate import Estimator, pretrain_estimator

CACHE = Path(__file__).resolve().parent.parent / ".cache"


def cached_estimator(n: int, epochs: int, seed: int = 0) -> tuple[Estimator, dict]:
    """Pretrain once per (n, epochs, seed); later sessions load the file."""
    CACHE.mkdir(exist_ok=True)
    stem = CACHE / f"est-n{n}-e{epochs}-s{seed}"
    model, report = stem.with_suffix(".json"), stem.with_suffix(".report.json")
    if model.exists() and report.exists():
        return Estimator.load(model), json.loads(report.read_text())
    start = time.perf_counter()
    est, rep = pretrain_estimator(hm.sample_pairs(n, seed), epochs=epochs, seed=seed)
    doc = rep.to_json() | {"seconds": time.perf_counter() - start}
    est.save(model)
    report.write_text(json.dumps(doc))
    return est, doc


@pytest.fixture(scope="session")
def quick_estimator() -> Estimator:
    # barely trained; enough to exercise the differentiable pipeline
    return cached_estimator(10_000, 3)[0]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
