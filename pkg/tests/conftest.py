import numpy as np
import pytest

from bifa.data import MultiStudyDataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_dataset(studies, **kw):
    return MultiStudyDataset(tuple(np.asarray(y, dtype=float) for y in studies), (), (), **kw)


def low_rank_studies(rng, S=2, N=200, P=8, K=2, noise=0.3, shared=True):
    """Studies drawn from a common rank-K factor model with isotropic noise."""
    phi = rng.normal(size=(P, K))
    out = []
    for _ in range(S):
        f = rng.normal(size=(N, K))
        y = f @ phi.T + noise * rng.normal(size=(N, P))
        out.append(y - y.mean(axis=0))
    return out, phi


# one line per acceptance criterion, printed in the session summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
