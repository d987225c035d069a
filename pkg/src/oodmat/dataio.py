"""Reading and writing structure datasets.

Two formats are supported.

``structured-records`` (``.jsonl``): one JSON object per line::

    {"id": "mp-1", "lattice": [[a1, a2, a3], [b1, b2, b3], [c1, c2, c3]],
     "frac_coords": [[x, y, z], ...], "numbers": [11, 17, ...], "target": 1.0}

Blank lines and lines starting with ``#`` are skipped.  Floats are written
with ``repr`` precision so a write/read round trip is exact.

``extended-xyz``: the usual frame layout, with ``Lattice="..."``,
``Properties=species:S:1:pos:R:3`` and a per-frame target field (``target``
by default) on the comment line.  Species may be symbols or atomic numbers;
positions are Cartesian.
"""

from __future__ import annotations

import json
import shlex
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .structure import CrystalStructure, LabeledDataset, Lattice

# index == atomic number
SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe "
    "Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au "
    "Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf "
    "Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()
_Z_OF = {sym: z for z, sym in enumerate(SYMBOLS) if z}

FORMATS = ("structured-records", "extended-xyz")


def atomic_number(token) -> int:
    token = str(token).strip()
    if token.isdigit():
        return int(token)
    try:
        return _Z_OF[token]
    except KeyError:
        raise ParseError(f"unknown element {token!r}") from None


def guess_format(path) -> str:
    return "extended-xyz" if Path(path).suffix.lower() in (".xyz", ".extxyz") else "structured-records"


def parse_dataset(path, format: str | None = None, target_key: str = "target") -> LabeledDataset:
    """Load a dataset, validating every record and wrapping coordinates."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    format = format or guess_format(path)
    if format == "structured-records":
        structures, targets = _read_records(path)
    elif format == "extended-xyz":
        structures, targets = _read_extxyz(path, target_key)
    else:
        raise ValueError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    return LabeledDataset(tuple(structures), np.array(targets, dtype=float), path.stem)


def _read_records(path):
    structures, targets = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            where = f"{path.name}:{lineno} (record {len(structures)})"
            try:
                rec = json.loads(line)
                lattice = rec["lattice"]
                frac = rec["frac_coords"]
                numbers = [atomic_number(z) for z in rec["numbers"]]
                target = float(rec["target"])
                sid = str(rec.get("id", len(structures)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{where}: {exc!s}") from exc
            if not np.isfinite(target):
                raise ValidationError(f"{where}: non-finite target {target!r}")
            try:
                structures.append(CrystalStructure(Lattice(lattice), frac, numbers, sid))
            except ValueError as exc:
                raise ValidationError(f"{where}: {exc}") from exc
            targets.append(target)
    return structures, targets


def _parse_comment(line):
    info = {}
    for tok in shlex.split(line):
        if "=" in tok:
            k, v = tok.split("=", 1)
            info[k] = v
    return info


def _read_extxyz(path, target_key):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    structures, targets = [], []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        where = f"{Path(path).name}:{pos + 1} (frame {len(structures)})"
        try:
            n = int(lines[pos])
            info = _parse_comment(lines[pos + 1])
            lattice = np.array(info["Lattice"].split(), dtype=float).reshape(3, 3)
            target = float(info[target_key])
            cols = _property_columns(info.get("Properties", "species:S:1:pos:R:3"))
            body = [lines[pos + 2 + k].split() for k in range(n)]
            numbers = [atomic_number(row[cols["species"]]) for row in body]
            p = cols["pos"]
            cart = np.array([row[p:p + 3] for row in body], dtype=float)
        except (IndexError, KeyError, ValueError) as exc:
            raise ParseError(f"{where}: {exc!s}") from exc
        if not np.isfinite(target):
            raise ValidationError(f"{where}: non-finite target {target!r}")
        try:
            frac = np.linalg.solve(lattice.T, cart.T).T
            sid = info.get("id", str(len(structures)))
            structures.append(CrystalStructure(Lattice(lattice), frac, numbers, sid))
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ValidationError(f"{where}: {exc}") from exc
        targets.append(target)
        pos += n + 2
    return structures, targets


def _property_columns(spec):
    parts = spec.split(":")
    cols, col = {}, 0
    for name, _kind, width in zip(parts[::3], parts[1::3], parts[2::3]):
        cols[name] = col
        col += int(width)
    if "species" not in cols or "pos" not in cols:
        raise KeyError("Properties must include species and pos")
    return cols


def write_dataset(ds: LabeledDataset, path, format: str | None = None):
    path = Path(path)
    format = format or guess_format(path)
    if format == "structured-records":
        with open(path, "w", encoding="utf-8") as fh:
            for s, y in zip(ds.structures, ds.targets):
                rec = {
                    "id": s.structure_id,
                    "lattice": s.lattice.rows.tolist(),
                    "frac_coords": s.fractional_coords.tolist(),
                    "numbers": s.atomic_numbers.tolist(),
                    "target": float(y),
                }
                fh.write(json.dumps(rec) + "\n")
    elif format == "extended-xyz":
        with open(path, "w", encoding="utf-8") as fh:
            for s, y in zip(ds.structures, ds.targets):
                lat = " ".join(repr(float(v)) for v in s.lattice.rows.ravel())
                fh.write(f"{len(s)}\n")
                fh.write(
                    f'Lattice="{lat}" Properties=species:S:1:pos:R:3 '
                    f'target={float(y)!r} id="{s.structure_id}" pbc="T T T"\n'
                )
                for z, r in zip(s.atomic_numbers, s.cartesian_coords):
                    fh.write(f"{SYMBOLS[z]} " + " ".join(repr(float(v)) for v in r) + "\n")
    else:
        raise ValueError(f"unknown dataset format {format!r}")
