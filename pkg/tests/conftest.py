import re

import numpy as np
import pytest
import scipy.sparse as sp

from vardct.projector import SystemMatrix
from vardct.scenarios import desk_scenario
from vardct.simulate import Sinogram
from vardct.transforms import build_transform
from vardct.vard import PosteriorState, Problem


@pytest.fixture(scope="session")
def scenario4():
    return desk_scenario(4)


@pytest.fixture(scope="session")
def scenario8():
    return desk_scenario(8)


@pytest.fixture(scope="session")
def scenario16():
    return desk_scenario(16)


def random_dense_problem(rng, n=6, p=4, kind="complete", grid=None, eta=50.0):
    """Small problem with a random dense nonnegative system matrix."""
    from vardct.projector import ImageGrid

    grid = grid or ImageGrid(2, 2, 1.0)
    dense = rng.uniform(0.0, 0.4, size=(n, grid.p))
    A = SystemMatrix(sp.csr_matrix(dense))
    T = build_transform(grid, kind)
    y = rng.poisson(eta * np.exp(-dense @ rng.uniform(0, 1, grid.p)))
    return Problem(A, T, Sinogram(y, eta)), dense


def random_state(rng, prob, m_scale=1.0):
    p, K = prob.A.p, prob.T.n_slots
    return PosteriorState(rng.uniform(0, m_scale, p), rng.uniform(0.05, 2.0, p),
                          rng.uniform(0.1, 5.0, K))


def small_problem(scenario, kind="complete", eta=1e3, seed=0, **kw):
    T = build_transform(scenario.grid, kind, **kw)
    return Problem(scenario.A, T, scenario.sample(eta, seed))


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(re.search(r"#(\d+)", s).group(1))):
            terminalreporter.write_line(line)
