import numpy as np
import pytest

from stratacausal import dgp
from stratacausal.panel import ObservedPanel

NAN = np.nan


@pytest.fixture(scope="session")
def populations():
    """Full-size scenario populations, generated lazily and shared."""
    cache = {}

    def get(scenario, size=1_000_000, seed=20240):
        key = (scenario, size, seed)
        if key not in cache:
            cache[key] = dgp.generate_population(dgp.scenario_params(scenario), size, seed)
        return cache[key]

    return get


@pytest.fixture
def small_panel():
    """Scenario-3 sample small enough for quick estimator runs."""
    pop = dgp.generate_population(dgp.scenario_params(3), 20_000, 7)
    return dgp.sample_observed(pop, 1500, 11)


def hand_panel(y, z, s=None, v=None):
    """Build a panel from per-wave lists; r is 1 wherever alive."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.ndim == 1:
        y, z = y[:, None], z[:, None]
    s = np.ones_like(y) if s is None else np.asarray(s, dtype=float)
    v = np.zeros(len(y)) if v is None else np.asarray(v, dtype=float)
    r = np.where(s == 1, 1.0, NAN)
    return ObservedPanel(v=v, z=z, y=y, s=s, r=r)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
