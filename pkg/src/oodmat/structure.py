"""Periodic crystal structures, labelled datasets and neighbour lists.

Distances are in Angstrom throughout.  A lattice is stored row-wise, so the
Cartesian position of a site with fractional coordinates ``f`` is
``f @ lattice.rows``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ValidationError

MAX_Z = 118
_DET_RTOL = 1e-10
_DET_ATOL = 1e-6  # A^3
MAX_IMAGES = 1_000_000


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def wrap_fractional(frac):
    """Map fractional coordinates into ``[0, 1)``.

    ``x % 1.0`` alone can return exactly 1.0 for tiny negative inputs, so
    that case is folded back to 0.
    """
    f = np.asarray(frac, dtype=float)
    f = f - np.floor(f)
    f[f >= 1.0] = 0.0
    return f


@dataclass(frozen=True)
class Lattice:
    rows: np.ndarray

    def __post_init__(self):
        rows = _frozen(self.rows)
        if rows.shape != (3, 3) or not np.all(np.isfinite(rows)):
            raise GeometryError(f"lattice must be a finite 3x3 matrix, got shape {rows.shape}")
        if np.linalg.det(rows) <= 0.0:
            raise GeometryError("lattice determinant must be strictly positive")
        object.__setattr__(self, "rows", rows)

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.rows))

    def heights(self) -> np.ndarray:
        """Perpendicular distance between opposite cell faces along each axis."""
        inv = np.linalg.inv(self.rows)
        return 1.0 / np.linalg.norm(inv, axis=0)

    def is_degenerate(self) -> bool:
        scale = np.prod(np.linalg.norm(self.rows, axis=1))
        return self.volume <= max(_DET_ATOL, _DET_RTOL * scale)


@dataclass(frozen=True)
class CrystalStructure:
    lattice: Lattice
    fractional_coords: np.ndarray
    atomic_numbers: np.ndarray
    structure_id: str = ""

    def __post_init__(self):
        if not isinstance(self.lattice, Lattice):
            object.__setattr__(self, "lattice", Lattice(self.lattice))
        frac = np.array(self.fractional_coords, dtype=float).reshape(-1, 3)
        z = np.array(self.atomic_numbers).reshape(-1)
        if len(frac) == 0:
            raise ValidationError("a structure needs at least one site")
        if len(z) != len(frac):
            raise ValidationError(
                f"{len(frac)} sites but {len(z)} atomic numbers ({self.structure_id!r})"
            )
        if not np.all(np.isfinite(frac)):
            raise ValidationError(f"non-finite coordinates in {self.structure_id!r}")
        if not np.all(np.equal(np.mod(z, 1), 0)):
            raise ValidationError("atomic numbers must be integers")
        z = z.astype(np.int64)
        if z.min() < 1 or z.max() > MAX_Z:
            raise ValidationError(f"atomic numbers must lie in [1, {MAX_Z}]")
        object.__setattr__(self, "fractional_coords", _frozen(wrap_fractional(frac)))
        object.__setattr__(self, "atomic_numbers", _frozen(z, np.int64))

    def __len__(self):
        return len(self.atomic_numbers)

    @property
    def cartesian_coords(self) -> np.ndarray:
        return self.fractional_coords @ self.lattice.rows

    def species(self) -> list[int]:
        return sorted(set(int(v) for v in self.atomic_numbers))


@dataclass(frozen=True)
class LabeledDataset:
    structures: tuple
    targets: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        structures = tuple(self.structures)
        targets = np.array(self.targets, dtype=float).reshape(-1)
        if len(structures) != len(targets):
            raise ValidationError(
                f"{len(structures)} structures but {len(targets)} targets"
            )
        bad = np.flatnonzero(~np.isfinite(targets))
        if len(bad):
            raise ValidationError(f"non-finite target at record {int(bad[0])}")
        object.__setattr__(self, "structures", structures)
        object.__setattr__(self, "targets", _frozen(targets))

    def __len__(self):
        return len(self.structures)

    def species(self) -> list[int]:
        zs = set()
        for s in self.structures:
            zs.update(int(v) for v in s.atomic_numbers)
        return sorted(zs)

    def subset(self, idx) -> "LabeledDataset":
        idx = [int(i) for i in idx]
        return LabeledDataset(
            tuple(self.structures[i] for i in idx), self.targets[idx], self.name
        )


@dataclass(frozen=True)
class NeighborList:
    """Flat pair arrays; pair ``p`` links ``centers[p]`` to ``neighbors[p]``.

    ``displacements[p]`` is the Cartesian vector from the centre atom to the
    neighbour image and ``distances[p]`` its length.  Pairs are grouped by
    centre in ascending order.
    """

    n_atoms: int
    r_cut: float
    centers: np.ndarray
    neighbors: np.ndarray
    displacements: np.ndarray
    distances: np.ndarray
    images: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.centers)

    def for_atom(self, i: int):
        """(neighbor_index, displacement, distance) arrays for atom ``i``."""
        lo, hi = np.searchsorted(self.centers, [i, i + 1])
        return self.neighbors[lo:hi], self.displacements[lo:hi], self.distances[lo:hi]

    def counts(self) -> np.ndarray:
        return np.bincount(self.centers, minlength=self.n_atoms)


def image_range(lattice: Lattice, r_cut: float) -> np.ndarray:
    """Number of periodic images to scan in each lattice direction."""
    return np.array([math.ceil(r_cut / h) + 1 for h in lattice.heights()], dtype=int)


def neighbor_list(s: CrystalStructure, r_cut: float) -> NeighborList:
    """All neighbour images within ``r_cut`` of every atom, periodic in 3-D.

    The zero-distance self image of each atom is excluded; its periodic
    copies at non-zero distance are kept.
    """
    if not r_cut > 0:
        raise ValueError(f"r_cut must be positive, got {r_cut}")
    if s.lattice.is_degenerate():
        raise GeometryError(f"degenerate lattice in structure {s.structure_id!r}")

    n = len(s)
    cart = s.cartesian_coords
    reach = image_range(s.lattice, r_cut)
    if np.prod(2 * reach + 1) > MAX_IMAGES:
        raise GeometryError(f"cell of {s.structure_id!r} too thin for r_cut={r_cut}: {reach.tolist()} images per axis")
    grids = [np.arange(-m, m + 1) for m in reach]
    shifts = np.stack(np.meshgrid(*grids, indexing="ij"), axis=-1).reshape(-1, 3)
    offsets = shifts @ s.lattice.rows  # (S, 3)

    # d[i, j, s] = r_j + offset_s - r_i
    disp = cart[None, :, None, :] + offsets[None, None, :, :] - cart[:, None, None, :]
    dist = np.sqrt(np.einsum("ijsk,ijsk->ijs", disp, disp))
    keep = (dist <= r_cut) & (dist > 0.0)
    ci, nj, si = np.nonzero(keep)  # row-major: grouped by centre

    return NeighborList(
        n_atoms=n,
        r_cut=float(r_cut),
        centers=_frozen(ci, np.int64),
        neighbors=_frozen(nj, np.int64),
        displacements=_frozen(disp[ci, nj, si].reshape(-1, 3)),
        distances=_frozen(dist[ci, nj, si]),
        images=_frozen(shifts[si].reshape(-1, 3), np.int64),
    )
