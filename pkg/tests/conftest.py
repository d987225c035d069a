import numpy as np
import pytest

from oodmat.structure import CrystalStructure, Lattice


def random_cell(rng, n_atoms=None, species=(1, 6, 8), min_dist=0.9, skew=0.3):
    """Small triclinic cell with well-separated atoms."""
    while True:
        rows = np.diag(rng.uniform(3.0, 6.0, 3)) + rng.uniform(-skew, skew, (3, 3)) * (1 - np.eye(3))
        if np.linalg.det(rows) > 0:
            break
    n = n_atoms or int(rng.integers(1, 7))
    frac = []
    while len(frac) < n:
        c = rng.random(3)
        ok = True
        for p in frac:
            d = (c - p) - np.round(c - p)
            if np.linalg.norm(d @ rows) < min_dist:
                ok = False
        if ok:
            frac.append(c)
    return CrystalStructure(Lattice(rows), np.array(frac), rng.choice(species, size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
