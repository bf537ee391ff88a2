import pytest
from hypothesis import HealthCheck, settings

from stlconf import estimator, miner, synth

settings.register_profile(
    "default",
    deadline=None,
    max_examples=100,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def drop_data():
    return synth.generate("sharp_drop", 400, 7), synth.generate("sharp_drop", 400, 1007)


@pytest.fixture(scope="session")
def drop_patterns(drop_data):
    train, _ = drop_data
    return miner.mine(train, seed=7)


@pytest.fixture(scope="session")
def drop_fitted(drop_data, drop_patterns):
    return estimator.fit_mapping(drop_patterns, drop_data[0], seed=7)


@pytest.fixture(scope="session")
def small_patterns():
    """A cheap 2+2 pattern set for tests that only need some structure."""
    data = synth.generate("sharp_drop", 80, 3)
    return data, miner.mine(data, seed=3, n_pos=2, n_neg=2, max_evals=40)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [value for name, value in getattr(rep, "user_properties", []) if name == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
