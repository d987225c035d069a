"""SOAP power-spectrum descriptors, computed from scratch.

The neighbour density of species ``Z`` around atom ``i`` is a sum of
Gaussians of width ``sigma`` placed on every neighbour of that species
within ``r_cut`` (and on the centre atom itself when ``include_center`` is
set and the species matches).  It is expanded as

    c[n, l, m] = integral g_n(r) Y_lm(r_hat) rho(r) d^3r

and contracted over ``m`` into the rotation invariant

    p[n, n', l] = pi * sqrt(8 / (2l + 1)) * sum_m c1[n, l, m] c2[n', l, m].

The angular integral of each Gaussian is done analytically,

    int Y_lm(r_hat) exp(-|r - r_j|^2 / 2 sigma^2) dOmega
        = 4 pi exp(-(r^2 + r_j^2) / 2 sigma^2) i_l(r r_j / sigma^2) Y_lm(r_hat_j),

leaving a 1-D Gauss-Legendre quadrature over ``[0, r_cut]``.

Conventions
-----------
* Real spherical harmonics without the Condon-Shortley phase, orthonormal on
  the sphere::

      Y_l0  = N_l0 P_l^0(cos t)
      Y_lm  = sqrt(2) N_lm P_l^m(cos t) cos(m phi)    (m > 0)
      Y_l-m = sqrt(2) N_lm P_l^m(cos t) sin(m phi)    (m > 0)

  with ``N_lm = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!)`` and ``P_l^m >= 0`` near
  the pole.  Column ``l*l + l + m`` holds ``Y_lm``.
* Radial basis: ``(r_cut - r)^(a+2)``, ``a = 1..n_max``, orthonormalised
  with weight ``r^2`` on ``[0, r_cut]`` through the inverse square root of
  the analytic overlap matrix.
* Per-atom vector layout: blocks for species pairs ``(Z1, Z2)`` with
  ``Z1 <= Z2`` in lexicographic order of ``cfg.species``.  Same-species
  blocks store ``n <= n'`` only (the block is symmetric); cross-species
  blocks store every ``(n, n')``.  Within a block, ``l`` runs fastest.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .structure import CrystalStructure, LabeledDataset, NeighborList, neighbor_list


@dataclass(frozen=True)
class SoapConfig:
    species: tuple
    r_cut: float = 5.0
    n_max: int = 4
    l_max: int = 4
    sigma: float = 0.5
    n_quad: int = 128
    include_center: bool = True

    def __post_init__(self):
        sp = tuple(int(z) for z in self.species)
        if not sp:
            raise ConfigError("species list is empty")
        if list(sp) != sorted(set(sp)):
            raise ConfigError("species must be sorted ascending without duplicates")
        if self.n_max < 1 or self.l_max < 0:
            raise ConfigError("need n_max >= 1 and l_max >= 0")
        if not (self.sigma > 0 and self.r_cut > 0):
            raise ConfigError("sigma and r_cut must be positive")
        if self.r_cut <= 3 * self.sigma:
            warnings.warn(f"r_cut={self.r_cut} <= 3*sigma; density will be truncated", stacklevel=3)
        object.__setattr__(self, "species", sp)

    @property
    def n_pairs(self) -> int:
        return len(self.species) * (len(self.species) + 1) // 2

    def atomic_length(self) -> int:
        s, n, lp = len(self.species), self.n_max, self.l_max + 1
        return s * (n * (n + 1) // 2) * lp + (s * (s - 1) // 2) * n * n * lp

    def material_length(self) -> int:
        return len(self.species) * self.atomic_length()


@dataclass(frozen=True)
class MaterialDescriptor:
    vector: np.ndarray
    source: str = "soap"


# ---------------------------------------------------------------------------
# special functions


def scaled_spherical_in(l_max: int, x) -> np.ndarray:
    """``exp(-x) * i_l(x)`` for ``l = 0..l_max``; shape ``x.shape + (l_max+1,)``.

    A power series handles ``x < 2``; larger arguments use Miller's downward
    recurrence normalised by the closed form of ``i_0``, with rescaling so
    intermediate values never overflow.
    """
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1)
    if np.any(flat < 0):
        raise ValueError("scaled_spherical_in needs x >= 0")
    out = np.zeros((flat.size, l_max + 1))
    small = flat < 2.0
    if np.any(small):
        out[small] = _in_series(l_max, flat[small]) * np.exp(-flat[small])[:, None]
    big = ~small
    if np.any(big):
        out[big] = _in_miller(l_max, flat[big])
    return out.reshape(x.shape + (l_max + 1,))


def _in_series(l_max, x):
    t = 0.5 * x * x
    res = np.empty((x.size, l_max + 1))
    lead = np.ones_like(x)  # x^l / (2l+1)!!
    for l in range(l_max + 1):
        if l:
            lead = lead * x / (2 * l + 1)
        term = np.ones_like(x)
        total = np.ones_like(x)
        for k in range(1, 60):
            term = term * t / (k * (2 * l + 2 * k + 1))
            total += term
            if np.all(term <= 1e-17 * total):
                break
        res[:, l] = lead * total
    return res


def _in_miller(l_max, x):
    start = l_max + int(math.ceil(x.max())) + 30
    inv_x = 1.0 / x
    hi = np.zeros_like(x)  # i_{l+1}
    cur = np.full_like(x, 1e-300)  # i_l
    res = np.zeros((x.size, l_max + 1))
    for l in range(start, 0, -1):
        lower = hi + (2 * l + 1) * inv_x * cur
        hi, cur = cur, lower
        if l - 1 <= l_max:
            res[:, l - 1] = cur
        big = np.abs(cur) > 1e250
        if np.any(big):
            hi[big] *= 1e-250
            cur[big] *= 1e-250
            res[big] *= 1e-250
    exact0 = -np.expm1(-2.0 * x) / (2.0 * x)
    return res * (exact0 / res[:, 0])[:, None]


def real_sph_harm(l_max: int, vectors) -> np.ndarray:
    """Real spherical harmonics at the directions of ``vectors`` (n, 3).

    Zero-length vectors return ``Y_00`` and zeros elsewhere.
    """
    v = np.atleast_2d(np.asarray(vectors, dtype=float))
    r = np.linalg.norm(v, axis=1)
    safe = np.where(r > 0, r, 1.0)
    ct = np.where(r > 0, v[:, 2] / safe, 1.0)
    ct = np.clip(ct, -1.0, 1.0)
    st = np.sqrt(np.maximum(0.0, 1.0 - ct * ct))
    phi = np.arctan2(v[:, 1], v[:, 0])

    n = len(v)
    out = np.zeros((n, (l_max + 1) ** 2))
    # associated Legendre P_l^m without the (-1)^m phase
    p = {}
    pmm = np.ones(n)
    for m in range(l_max + 1):
        if m:
            pmm = pmm * (2 * m - 1) * st
        p[m, m] = pmm
        if m + 1 <= l_max:
            p[m + 1, m] = ct * (2 * m + 1) * pmm
        for l in range(m + 2, l_max + 1):
            p[l, m] = ((2 * l - 1) * ct * p[l - 1, m] - (l + m - 1) * p[l - 2, m]) / (l - m)
    for l in range(l_max + 1):
        for m in range(l + 1):
            norm = math.sqrt((2 * l + 1) / (4 * math.pi) * math.factorial(l - m) / math.factorial(l + m))
            if m == 0:
                out[:, l * l + l] = norm * p[l, 0]
            else:
                base = math.sqrt(2.0) * norm * p[l, m]
                out[:, l * l + l + m] = base * np.cos(m * phi)
                out[:, l * l + l - m] = base * np.sin(m * phi)
    return out


# ---------------------------------------------------------------------------
# radial basis


def radial_overlap(r_cut: float, n_max: int) -> np.ndarray:
    """Analytic ``int_0^rc r^2 phi_a phi_b dr`` for ``phi_a = (rc - r)^(a+2)``."""
    a = np.arange(1, n_max + 1)
    p = (a[:, None] + 2) + (a[None, :] + 2)
    return 2.0 * r_cut ** (p + 3.0) / ((p + 1.0) * (p + 2.0) * (p + 3.0))


def radial_transform(r_cut: float, n_max: int) -> np.ndarray:
    """Matrix ``W`` with ``g_n = sum_a W[n, a] phi_a`` orthonormal under r^2 dr."""
    s = radial_overlap(r_cut, n_max)
    d = 1.0 / np.sqrt(np.diag(s))
    s_norm = s * d[:, None] * d[None, :]
    evals, evecs = np.linalg.eigh(s_norm)
    inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
    return inv_sqrt * d[None, :]


def radial_basis(r, r_cut: float, n_max: int) -> np.ndarray:
    """Orthonormal basis values, shape ``(n_max, len(r))``."""
    r = np.asarray(r, dtype=float)
    a = np.arange(1, n_max + 1)
    phi = np.clip(r_cut - r, 0.0, None)[None, :] ** (a[:, None] + 2.0)
    return radial_transform(r_cut, n_max) @ phi


def _quadrature(cfg: SoapConfig):
    x, w = np.polynomial.legendre.leggauss(cfg.n_quad)
    r = 0.5 * cfg.r_cut * (x + 1.0)
    w = 0.5 * cfg.r_cut * w
    g = radial_basis(r, cfg.r_cut, cfg.n_max)
    return r, w * r * r, g


# ---------------------------------------------------------------------------
# expansion and power spectrum


def _species_index(s: CrystalStructure, cfg: SoapConfig) -> np.ndarray:
    lookup = {z: k for k, z in enumerate(cfg.species)}
    missing = sorted(set(int(z) for z in s.atomic_numbers) - set(lookup))
    if missing:
        raise ConfigError(f"species {missing} of {s.structure_id!r} not in SoapConfig.species")
    return np.array([lookup[int(z)] for z in s.atomic_numbers])


def soap_coefficients(s: CrystalStructure, cfg: SoapConfig, nl: NeighborList | None = None) -> np.ndarray:
    """Density expansion ``c``, shape ``(n_atoms, n_species, n_max, (l_max+1)^2)``."""
    if nl is None:
        nl = neighbor_list(s, cfg.r_cut)
    elif abs(nl.r_cut - cfg.r_cut) > 1e-12:
        raise ConfigError(f"neighbour list cutoff {nl.r_cut} != SoapConfig.r_cut {cfg.r_cut}")
    sp = _species_index(s, cfg)
    lmax = cfg.l_max
    r, wr2, g = _quadrature(cfg)
    inv2s2 = 0.5 / cfg.sigma**2
    l_of = np.repeat(np.arange(lmax + 1), 2 * np.arange(lmax + 1) + 1)

    c = np.zeros((len(s), len(cfg.species), cfg.n_max, (lmax + 1) ** 2))
    if len(nl):
        rj = nl.distances
        bessel = scaled_spherical_in(lmax, r[None, :] * rj[:, None] / cfg.sigma**2)  # (P, Q, L)
        gauss = np.exp(-inv2s2 * (r[None, :] - rj[:, None]) ** 2)  # (P, Q)
        kern = 4.0 * np.pi * gauss[:, :, None] * bessel
        radial = np.einsum("q,nq,pql->pnl", wr2, g, kern)  # (P, n, L)
        ylm = real_sph_harm(lmax, nl.displacements)  # (P, lm)
        contrib = radial[:, :, l_of] * ylm[:, None, :]
        # canonical summation order so relabelling atoms gives bit-identical sums
        d = nl.displacements
        order = np.lexsort((d[:, 2], d[:, 1], d[:, 0], rj, sp[nl.neighbors], nl.centers))
        np.add.at(c, (nl.centers[order], sp[nl.neighbors][order]), contrib[order])
    if cfg.include_center:
        center = 4.0 * np.pi * np.exp(-inv2s2 * r * r)
        c0 = (g * (wr2 * center)[None, :]).sum(axis=1) / (2.0 * math.sqrt(math.pi))
        c[np.arange(len(s)), sp, :, 0] += c0[None, :]
    return c


def power_spectrum_dense(c: np.ndarray, l_max: int) -> np.ndarray:
    """Full ``p[atom, Z1, Z2, n, n', l]`` from expansion coefficients."""
    n_atoms, n_sp, n_max, _ = c.shape
    out = np.empty((n_atoms, n_sp, n_sp, n_max, n_max, l_max + 1))
    for l in range(l_max + 1):
        block = c[..., l * l:(l + 1) * (l + 1)]
        pref = math.pi * math.sqrt(8.0 / (2 * l + 1))
        out[..., l] = pref * np.einsum("asnm,atkm->astnk", block, block)
    return out


def pack_power_spectrum(dense: np.ndarray) -> np.ndarray:
    """Pack a dense power spectrum into the per-atom vector layout."""
    n_atoms, n_sp, _, n_max, _, _ = dense.shape
    iu, ju = np.triu_indices(n_max)
    parts = []
    for a in range(n_sp):
        for b in range(a, n_sp):
            blk = dense[:, a, b]
            if a == b:
                parts.append(blk[:, iu, ju, :].reshape(n_atoms, -1))
            else:
                parts.append(blk.reshape(n_atoms, -1))
    return np.concatenate(parts, axis=1)


def unpack_power_spectrum(vec: np.ndarray, cfg: SoapConfig) -> np.ndarray:
    """Inverse of :func:`pack_power_spectrum`, restoring the symmetric blocks."""
    vec = np.atleast_2d(vec)
    n_atoms = len(vec)
    n_sp, n_max, lp = len(cfg.species), cfg.n_max, cfg.l_max + 1
    out = np.zeros((n_atoms, n_sp, n_sp, n_max, n_max, lp))
    iu, ju = np.triu_indices(n_max)
    pos = 0
    for a in range(n_sp):
        for b in range(a, n_sp):
            if a == b:
                size = len(iu) * lp
                blk = vec[:, pos:pos + size].reshape(n_atoms, len(iu), lp)
                out[:, a, a, iu, ju] = blk
                out[:, a, a, ju, iu] = blk
            else:
                size = n_max * n_max * lp
                blk = vec[:, pos:pos + size].reshape(n_atoms, n_max, n_max, lp)
                out[:, a, b] = blk
                out[:, b, a] = blk.transpose(0, 2, 1, 3)
            pos += size
    return out


def soap_atomic(s: CrystalStructure, cfg: SoapConfig, nl: NeighborList | None = None) -> np.ndarray:
    """Per-atom SOAP vectors, one row per atom (length ``cfg.atomic_length()``)."""
    c = soap_coefficients(s, cfg, nl)
    return pack_power_spectrum(power_spectrum_dense(c, cfg.l_max))


def aggregate_material(atoms: np.ndarray, s: CrystalStructure, cfg: SoapConfig) -> MaterialDescriptor:
    """Mean per-atom vector for each species, stacked in ``cfg.species`` order."""
    atoms = np.asarray(atoms, dtype=float)
    if atoms.shape != (len(s), cfg.atomic_length()):
        raise ValueError(f"expected {(len(s), cfg.atomic_length())} atomic vectors, got {atoms.shape}")
    sp = _species_index(s, cfg)
    rows = np.zeros((len(cfg.species), atoms.shape[1]))
    for k in range(len(cfg.species)):
        members = np.flatnonzero(sp == k)
        if len(members):
            # sorted summation keeps the result independent of atom order
            block = atoms[members]
            order = np.lexsort(block.T[::-1])
            rows[k] = block[order].sum(axis=0) / len(members)
    return MaterialDescriptor(rows.reshape(-1), "soap")


def material_descriptor(s: CrystalStructure, cfg: SoapConfig) -> np.ndarray:
    return aggregate_material(soap_atomic(s, cfg), s, cfg).vector


def _material_chunk(args):
    structures, cfg = args
    return [material_descriptor(s, cfg) for s in structures]


def compute_descriptors(ds: LabeledDataset, cfg: SoapConfig | None = None, workers: int = 1) -> np.ndarray:
    """SOAP material vectors for a whole dataset, shape ``(N, cfg.material_length())``.

    With ``workers > 1`` structures are farmed out to processes in fixed
    contiguous chunks; the result does not depend on the worker count.
    """
    if cfg is None:
        cfg = SoapConfig(species=tuple(ds.species()))
    if workers <= 1 or len(ds) < 2 * workers:
        rows = [material_descriptor(s, cfg) for s in ds.structures]
    else:
        chunks = np.array_split(np.arange(len(ds)), workers)
        jobs = [([ds.structures[i] for i in ch], cfg) for ch in chunks]
        with ProcessPoolExecutor(workers) as ex:
            rows = [row for part in ex.map(_material_chunk, jobs) for row in part]
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# descriptor files


def save_descriptors(X, path):
    """Write a descriptor matrix as CSV with round-trip float precision."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for row in X:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_external_descriptors(path) -> np.ndarray:
    """Read a numeric CSV (one row per structure, any width) into an N x D matrix.

    A non-numeric first row is treated as a header and skipped.
    """
    rows = []
    with open(Path(path), newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec or all(not c.strip() for c in rec):
                continue
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise ParseError(f"{Path(path).name}:{lineno}: non-numeric cell") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(
                    f"{Path(path).name}:{lineno}: ragged row ({len(rows[-1])} columns, expected {len(rows[0])})"
                )
    if not rows:
        raise ParseError(f"{path}: no data rows")
    X = np.array(rows, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ParseError(f"{path}: non-finite entries")
    return X
