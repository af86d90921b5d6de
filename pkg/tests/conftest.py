import pytest

from vibe.imitation.env import Env
from vibe.sim.world import ReplayData
from vibe.synth import SynthConfig, generate_traffic


@pytest.fixture(scope="session")
def small_traffic():
    """A short synthetic roundabout recording shared by the simulation-level tests."""
    data = generate_traffic(SynthConfig(train_ticks=3000, val_ticks=1500, test_ticks=2000))
    return data, Env(data.scene, ReplayData(data.trajectories))


ACCEPTANCE = []  # (criterion, passed, detail) lines collected by test_acceptance.py


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n, ok, detail in sorted(ACCEPTANCE):
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
