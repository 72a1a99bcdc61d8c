import numpy as np
import pytest
from hypothesis import settings

from clsna.model import GlobalParams, LatentTrajectory, NetworkSeries

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


def random_instance(rng, n=5, T=3, p=2, churn=True, density=0.4):
    """Small random series with optional churn, positions and parameters."""
    labels = np.where(np.arange(n) < (n + 1) // 2, 1, 2)
    if churn:
        presence = rng.random((T, n)) < 0.75
        for t in range(T):
            if presence[t].sum() < 2:
                presence[t, rng.choice(n, 2, replace=False)] = True
    else:
        presence = np.ones((T, n), dtype=bool)
    adj = np.zeros((T, n, n), dtype=bool)
    for t in range(T):
        upper = np.triu(rng.random((n, n)) < density, 1)
        upper &= presence[t][:, None] & presence[t][None, :]
        adj[t] = upper | upper.T
    series = NetworkSeries(tuple(f"n{i}" for i in range(n)), labels, presence, adj)
    latent = LatentTrajectory(rng.normal(0, 1.5, (T, n, p)), presence)
    params = GlobalParams(*rng.normal(0, 0.7, 5))
    return series, latent, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria append "(label, passed, detail)" here; printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for label, passed, detail in ACCEPTANCE_LINES:
            terminalreporter.write_line(f"{label}: {'PASS' if passed else 'FAIL'}  {detail}")
