"""Desk-scale synthetic crystal datasets with an exactly known target."""

from __future__ import annotations

import itertools

import numpy as np

from .errors import GenerationError
from .structure import CrystalStructure, LabeledDataset, Lattice, neighbor_list

SPECIES = (1, 6, 7, 8, 14)  # H C N O Si
EDGE_RANGE = (3.0, 8.0)
ATOM_RANGE = (2, 8)
MIN_DISTANCE = 1.2
COORD_CUTOFF = 3.5
INV_DIST_WEIGHT = 0.1
MAX_REJECTIONS = 10_000

_SHIFTS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=float)


def _min_image(frac_a, frac_b, rows):
    """Minimum-image distance from a to b (exact for orthorhombic cells)."""
    d = (frac_b - frac_a) + _SHIFTS
    return float(np.sqrt(((d @ rows) ** 2).sum(axis=1)).min())


def mean_coordination(s: CrystalStructure, cutoff: float = COORD_CUTOFF) -> float:
    return float(neighbor_list(s, cutoff).counts().mean())


def mean_inverse_distance(s: CrystalStructure) -> float:
    """Mean of 1/d over distinct atom pairs in the cell, d the minimum-image distance."""
    f = s.fractional_coords
    rows = s.lattice.rows
    inv = [1.0 / _min_image(f[i], f[j], rows) for i, j in itertools.combinations(range(len(s)), 2)]
    return float(np.mean(inv)) if inv else 0.0


def synthetic_target(s: CrystalStructure) -> float:
    """Mean coordination within 3.5 A plus 0.1 x mean pairwise inverse distance."""
    return mean_coordination(s) + INV_DIST_WEIGHT * mean_inverse_distance(s)


def random_structure(rng: np.random.Generator, structure_id: str = "") -> CrystalStructure:
    """Orthorhombic cell with 2-8 atoms at least 1.2 A apart (rejection sampling)."""
    edges = rng.uniform(*EDGE_RANGE, size=3)
    rows = np.diag(edges)
    n_atoms = int(rng.integers(ATOM_RANGE[0], ATOM_RANGE[1] + 1))
    species = rng.choice(SPECIES, size=n_atoms)
    placed = []
    rejections = 0
    while len(placed) < n_atoms:
        cand = rng.random(3)
        if all(_min_image(p, cand, rows) >= MIN_DISTANCE for p in placed):
            placed.append(cand)
            continue
        rejections += 1
        if rejections >= MAX_REJECTIONS:
            raise GenerationError(f"could not place {n_atoms} atoms in cell {edges.round(3)} for {structure_id!r}")
    return CrystalStructure(Lattice(rows), np.array(placed), species, structure_id)


def generate_synthetic(n: int, seed: int = 0, name: str | None = None) -> LabeledDataset:
    if n < 10:
        raise ValueError("synthetic datasets need n >= 10")
    rng = np.random.default_rng(seed)
    structures = [random_structure(rng, f"synth-{seed}-{i:05d}") for i in range(n)]
    targets = [synthetic_target(s) for s in structures]
    return LabeledDataset(tuple(structures), np.array(targets), name or f"synthetic-{n}-{seed}")


def shifted_by_descriptor(ds: LabeledDataset, X, amplitude: float = 5.0, quantile: float = 0.75) -> LabeledDataset:
    """Add ``amplitude`` to targets whose first principal-component score of
    ``X`` (standardised columns) is at or above the given quantile."""
    X = np.asarray(X, dtype=float)
    std = X.std(axis=0)
    Z = (X - X.mean(axis=0)) / np.where(std > 0, std, 1.0)
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    v = vt[0] if vt[0][np.argmax(np.abs(vt[0]))] > 0 else -vt[0]
    score = Z @ v
    shifted = ds.targets + amplitude * (score >= np.quantile(score, quantile))
    return LabeledDataset(ds.structures, shifted, ds.name + "-shifted")
