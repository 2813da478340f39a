import numpy as np
import pytest

from mgmlmc import fem, mesh, mc, randfield

ACCEPTANCE_LINES = []


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def hier2():
    return mesh.build_hierarchy(L=2)


@pytest.fixture(scope="session")
def hier3():
    return mesh.build_hierarchy(L=3)


@pytest.fixture(scope="session")
def exp1():
    return mc.setup(L=1)


@pytest.fixture(scope="session")
def exp2():
    return mc.setup(L=2)


def unit_K(disc):
    return np.ones_like(disc.wm), np.ones_like(disc.wi)


def random_K(disc, level_index, seed, exp):
    s = exp.sample(seed, 0, 0, level_index)
    return randfield.level_view(s, exp.points, level_index)


def unit_system(level, **kw):
    d = fem.Discretization(level, **kw)
    return d, d.assemble(*unit_K(d))
