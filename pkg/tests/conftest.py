import numpy as np
import pytest

from mgdispatch.network import Branch, NetworkModel


def two_bus(z=0.01 + 0.01j, shunt=0j, ampacity=np.inf, **kw):
    return NetworkModel(2, (Branch(0, 1, z, shunt, ampacity),), base_power=1e6, base_voltage=1e3, **kw)


def three_bus(z1, z2, shunt=0j, triangle=False, **kw):
    branches = [Branch(0, 1, z1, shunt), Branch(1, 2, z2, shunt)]
    if triangle:
        branches.append(Branch(0, 2, z2, shunt))
    return NetworkModel(3, tuple(branches), base_power=1e6, base_voltage=1e3, **kw)


def random_three_bus(rng):
    z1 = complex(rng.uniform(0.005, 0.05), rng.uniform(0.005, 0.05))
    z2 = complex(rng.uniform(0.005, 0.05), rng.uniform(0.005, 0.05))
    model = three_bus(z1, z2, shunt=complex(0, rng.uniform(0, 0.01)), triangle=bool(rng.integers(2)))
    s = -rng.uniform(0.05, 0.4, 2) - 1j * rng.uniform(0.0, 0.15, 2)
    return model, s


@pytest.fixture(scope="session")
def toy():
    from mgdispatch import fixtures, problems
    mv, lvs, sc = fixtures.toy_system()
    return problems.linearize_system(mv, lvs, sc)


@pytest.fixture(scope="session")
def cigre():
    from mgdispatch import fixtures, problems
    mv, lvs, sc = fixtures.cigre_system()
    return problems.linearize_system(mv, lvs, sc)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        state, title = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {state}  {title}")
