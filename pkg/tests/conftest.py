import numpy as np
import pytest

from atm_lab import pipeline

ACCEPTANCE_LINES: list[str] = []
SEEDS = (1, 2, 3, 4, 5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def small_config(**kw):
    cfg = pipeline.TrainConfig(
        stage1_steps=20, stage2_steps=15, stage3_steps=15, batch_size=8, n_train=60, n_eval=30,
        report_arms=(), dims=pipeline.Dims(l=4, m=6, c=8, n=3, d=6, v=2, h=16, h_dec=8, d_out=6))
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


class RunCache:
    """Desk-config training runs shared by every test in the session."""

    def __init__(self):
        self.results = {}
        self.snapshots = {}

    def get(self, seed: int, arm: str = "full") -> pipeline.RunResult:
        key = (seed, arm)
        if key not in self.results:
            cfg = pipeline.preset("desk")
            cfg.seed = seed
            snaps = {}

            def grab(stage, state):
                snaps[stage] = {k: v.copy() for k, v in state.params().items()}

            self.results[key] = pipeline.run(cfg, arm, on_stage=grab)
            self.snapshots[key] = snaps
        return self.results[key]


@pytest.fixture(scope="session")
def runs():
    return RunCache()
