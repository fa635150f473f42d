import numpy as np
import pytest

from vaultopt.adaptive import AdaptiveOptions, member_adding_solve
from vaultopt.assembly import LoadSpec, discretize_load
from vaultopt.geometry import PolygonDomain, build_grid


def square_grid(N, a=1.0):
    dom = PolygonDomain.rectangle(a)
    return dom, build_grid(dom, a / (N - 1))


@pytest.fixture(scope="session")
def uniform_11():
    dom, grid = square_grid(11)
    f = discretize_load(LoadSpec(area_loads=[-1.0]), grid)
    sol, state = member_adding_solve(grid, dom, f)
    return dom, grid, f, sol, state


@pytest.fixture(scope="session")
def center_5():
    dom, grid = square_grid(5)
    f = discretize_load(LoadSpec(point_loads=[((0.5, 0.5), -1.0)]), grid)
    sol, state = member_adding_solve(grid, dom, f)
    return dom, grid, f, sol, state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
