import itertools

import numpy as np
import pytest

from oodmat.errors import GeometryError, ValidationError
from oodmat.structure import CrystalStructure, LabeledDataset, Lattice, image_range, neighbor_list, wrap_fractional

from conftest import random_cell


def brute_force(s, r_cut, reach=3):
    cart = s.cartesian_coords
    out = []
    for i in range(len(s)):
        for j in range(len(s)):
            for img in itertools.product(range(-reach, reach + 1), repeat=3):
                d = cart[j] + np.array(img) @ s.lattice.rows - cart[i]
                r = np.linalg.norm(d)
                if 0 < r <= r_cut:
                    out.append((i, j, img, round(r, 9)))
    return sorted(out)


def as_tuples(nl):
    return sorted((int(c), int(n), tuple(int(x) for x in im), round(float(d), 9))
                  for c, n, im, d in zip(nl.centers, nl.neighbors, nl.images, nl.distances))


def test_cubic_six_neighbors():
    s = CrystalStructure(Lattice(np.eye(3) * 2.0), [[0, 0, 0]], [11])
    nl = neighbor_list(s, 2.5)
    assert len(nl) == 6
    np.testing.assert_allclose(nl.distances, 2.0)
    assert as_tuples(nl) == brute_force(s, 2.5)


def test_small_cutoff_empty():
    s = CrystalStructure(Lattice(np.eye(3) * 4.0), [[0, 0, 0], [0.5, 0.5, 0.5]], [1, 8])
    nl = neighbor_list(s, 1.0)
    assert len(nl) == 0
    assert nl.counts().tolist() == [0, 0]


def test_two_atom_symmetry():
    s = CrystalStructure(Lattice(np.diag([3.0, 4.0, 5.0])), [[0.1, 0.2, 0.3], [0.6, 0.5, 0.4]], [1, 8])
    nl = neighbor_list(s, 4.0)
    d01 = sorted(nl.distances[(nl.centers == 0) & (nl.neighbors == 1)])
    d10 = sorted(nl.distances[(nl.centers == 1) & (nl.neighbors == 0)])
    np.testing.assert_allclose(d01, d10, atol=1e-12)


def test_matches_brute_force_random_cells():
    rng = np.random.default_rng(7)
    for _ in range(50):
        s = random_cell(rng, skew=0.5)
        r_cut = float(rng.uniform(1.0, 6.0))
        assert np.all(image_range(s.lattice, r_cut) <= 3)
        assert as_tuples(neighbor_list(s, r_cut)) == brute_force(s, r_cut)


def test_translation_keeps_distances():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = random_cell(rng)
        moved = CrystalStructure(s.lattice, s.fractional_coords + rng.random(3), s.atomic_numbers)
        a = np.sort(neighbor_list(s, 4.0).distances)
        b = np.sort(neighbor_list(moved, 4.0).distances)
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_periodic_self_images_included():
    s = CrystalStructure(Lattice(np.diag([2.0, 10.0, 10.0])), [[0, 0, 0]], [1])
    nl = neighbor_list(s, 2.1)
    assert len(nl) == 2
    assert set(nl.neighbors.tolist()) == {0}


def test_wrap():
    np.testing.assert_allclose(wrap_fractional([1.25, -0.25, 1.0]), [0.25, 0.75, 0.0])
    w = wrap_fractional([-1e-18])
    assert 0.0 <= w[0] < 1.0


def test_bad_inputs():
    with pytest.raises(GeometryError):
        Lattice(np.zeros((3, 3)))
    with pytest.raises(GeometryError):
        Lattice(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        CrystalStructure(Lattice(np.eye(3)), [[0, 0, 0]], [0])
    s = CrystalStructure(Lattice(np.eye(3) * 3), [[0, 0, 0]], [1])
    with pytest.raises(ValueError):
        neighbor_list(s, 0.0)
    with pytest.raises((ValidationError, ValueError)):
        LabeledDataset((s,), np.array([np.nan]), "x")


def test_degenerate_lattice_geometry_error():
    rows = np.diag([1.0, 1.0, 1e-13])
    try:
        lat = Lattice(rows)
    except GeometryError:
        return
    s = CrystalStructure(lat, [[0, 0, 0]], [1])
    with pytest.raises(GeometryError):
        neighbor_list(s, 1.0)


def test_dataset_subset_and_species():
    s1 = CrystalStructure(Lattice(np.eye(3) * 3), [[0, 0, 0]], [8])
    s2 = CrystalStructure(Lattice(np.eye(3) * 3), [[0, 0, 0], [0.5, 0.5, 0.5]], [1, 14])
    ds = LabeledDataset((s1, s2), np.array([1.0, 2.0]), "d")
    assert ds.species() == [1, 8, 14]
    sub = ds.subset([1])
    assert len(sub) == 1 and sub.targets.tolist() == [2.0]
