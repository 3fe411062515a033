import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance():
    """Record one tab-separated PASS/FAIL line per acceptance criterion."""
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}\t{name}\t{detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


@pytest.fixture(scope="session")
def trained_alignment():
    """TM-CAM parameters trained on shifted textures (fixed pooling encoder, C=3)."""
    from mucan import network as nw
    config = nw.MucanConfig().replace(channels=3)
    store, losses = nw.train_alignment_toy(config, iterations=400, seed=0)
    return store, config, losses


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
