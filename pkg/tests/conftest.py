import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dvd", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dvd")

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {cid:>2}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bench_stage():
    """``get(seed) -> (cfg, stage, drift)`` on the default benchmark, computed once per seed."""
    from dvd import pipeline as pl

    cache = {}

    def get(seed):
        if seed not in cache:
            cfg = pl.BenchmarkConfig(seed=seed)
            stage = pl.pretrain_stage(cfg)
            cache[seed] = (cfg, stage, pl.fit_drift(stage, cfg))
        return cache[seed]

    return get
