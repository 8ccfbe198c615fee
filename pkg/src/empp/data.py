"""Molecules, XYZ I/O, neighbour lists and synthetic toy datasets."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .so3 import random_rotation

SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {s: i + 1 for i, s in enumerate(SYMBOLS)}
SPLITS = ("train", "val", "test")


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class GeometryError(ValueError):
    """Two atoms share a position, so a direction between them is undefined."""


@dataclass
class Molecule:
    z: np.ndarray
    pos: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    comment: str = ""

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.int64).reshape(-1)
        self.pos = np.asarray(self.pos, dtype=np.float64).reshape(-1, 3)
        if len(self.z) != len(self.pos):
            raise ValueError(f"{len(self.z)} atomic numbers but {len(self.pos)} positions")
        if not np.all(np.isfinite(self.pos)):
            raise ValueError("non-finite coordinates")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.z)

    def transformed(self, rot=None, shift=None) -> "Molecule":
        """Copy with positions mapped to ``R p + t`` (forces rotated alike)."""
        rot = np.eye(3) if rot is None else np.asarray(rot)
        shift = np.zeros(3) if shift is None else np.asarray(shift)
        forces = None if self.forces is None else self.forces @ rot.T
        return Molecule(self.z.copy(), self.pos @ rot.T + shift, self.energy, forces, self.comment)


# --------------------------------------------------------------------------
# XYZ
# --------------------------------------------------------------------------

_ENERGY = re.compile(r"energy\s*=\s*([-+0-9.eEdD]+)")


def parse_xyz(text: str) -> list[Molecule]:
    """Parse concatenated XYZ blocks; ``energy=<float>`` in a comment becomes the label."""
    lines = text.splitlines()
    mols: list[Molecule] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n = int(lines[i].strip())
        except ValueError:
            raise ParseError(i + 1, f"expected an atom count, got {lines[i].strip()!r}") from None
        if n < 0:
            raise ParseError(i + 1, "negative atom count")
        if i + 1 >= len(lines):
            raise ParseError(i + 2, "missing comment line")
        comment = lines[i + 1]
        energy = None
        m = _ENERGY.search(comment)
        if m:
            try:
                energy = float(m.group(1).replace("d", "e").replace("D", "e"))
            except ValueError:
                raise ParseError(i + 2, f"bad energy {m.group(1)!r}") from None
        z, pos, forces = [], [], []
        for k in range(n):
            ln = i + 2 + k
            if ln >= len(lines) or not lines[ln].strip():
                raise ParseError(ln + 1, f"expected {n} atoms, found {k}")
            parts = lines[ln].split()
            sym = parts[0]
            num = ATOMIC_NUMBER.get(sym.capitalize()) if not sym.isdigit() else int(sym)
            if num is None or not 1 <= num <= len(SYMBOLS):
                raise ParseError(ln + 1, f"unknown element {sym!r}")
            if len(parts) not in (4, 7):
                raise ParseError(ln + 1, f"expected 'Symbol x y z', got {lines[ln].strip()!r}")
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise ParseError(ln + 1, f"non-numeric coordinate in {lines[ln].strip()!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError(ln + 1, "non-finite coordinate")
            z.append(num)
            pos.append(vals[:3])
            if len(vals) == 6:
                forces.append(vals[3:])
        end = i + 2 + n
        # a following non-blank line that is not a count line means too many atoms
        if end < len(lines) and lines[end].strip():
            try:
                int(lines[end].strip())
            except ValueError:
                raise ParseError(end + 1, f"atom row beyond the declared count {n}") from None
        mols.append(
            Molecule(
                np.array(z, dtype=np.int64),
                np.array(pos, dtype=np.float64).reshape(-1, 3),
                energy,
                np.array(forces) if forces and len(forces) == n else None,
                comment,
            )
        )
        i = end
    return mols


def read_xyz(path) -> list[Molecule]:
    return parse_xyz(Path(path).read_text())


def format_xyz(mols: list[Molecule]) -> str:
    out = []
    for mol in mols:
        out.append(str(len(mol)))
        comment = mol.comment.strip()
        if mol.energy is not None:
            comment = _ENERGY.sub("", comment).strip()
            comment = (f"energy={float(mol.energy)!r} " + comment).strip()
        out.append(comment)
        for k, (zk, p) in enumerate(zip(mol.z, mol.pos)):
            row = f"{SYMBOLS[zk - 1]} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}"
            if mol.forces is not None:
                f = mol.forces[k]
                row += f" {float(f[0])!r} {float(f[1])!r} {float(f[2])!r}"
            out.append(row)
    return "\n".join(out) + ("\n" if out else "")


def write_xyz(path, mols: list[Molecule]) -> None:
    Path(path).write_text(format_xyz(mols))


# --------------------------------------------------------------------------
# neighbour lists
# --------------------------------------------------------------------------


def neighbor_list(pos, cutoff: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Directed edges ``j -> k`` with ``0 < |p_k - p_j| <= cutoff``.

    Returns ``(src, dst, vec, dist)`` where ``vec = p_dst - p_src``, sorted by
    ``(src, dst)``.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    if len(pos) < 2:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros((0, 3)), np.zeros(0)
    tree = cKDTree(pos)
    pairs = tree.query_pairs(cutoff, output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(pos[pairs[:, 1]] - pos[pairs[:, 0]], axis=1)
        if np.any(d == 0):
            a, b = pairs[np.argmax(d == 0)]
            raise GeometryError(f"atoms {a} and {b} share a position")
        # query_pairs compares with floating slack; enforce the inclusive bound exactly
        pairs = pairs[d <= cutoff]
    src = np.concatenate([pairs[:, 0], pairs[:, 1]]).astype(np.int64)
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]]).astype(np.int64)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    vec = pos[dst] - pos[src]
    return src, dst, vec, np.linalg.norm(vec, axis=1)


def neighbors_of_point(pos, point, cutoff: float, exclude: int | None = None) -> np.ndarray:
    """Indices of atoms within ``cutoff`` of ``point`` (strictly positive distance)."""
    d = np.linalg.norm(np.asarray(pos) - np.asarray(point), axis=1)
    mask = (d > 0) & (d <= cutoff)
    if exclude is not None:
        mask[exclude] = False
    return np.nonzero(mask)[0]


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)


def template(name: str) -> tuple[np.ndarray, np.ndarray]:
    """Rigid reference geometry ``(z, pos)`` centred at the origin."""
    if name == "tetrahedral":
        return np.array([6, 1, 1, 1, 1]), np.vstack([np.zeros(3), 1.09 * _TETRA])
    if name == "planar_hex":
        # regular hexagon: circumradius equals the bond length
        ang = 2 * np.pi * np.arange(6) / 6
        return np.full(6, 6), 1.39 * np.stack([np.cos(ang), np.sin(ang), np.zeros(6)], axis=1)
    if name == "chain":
        # zig-zag backbone, bond 1.5, tetrahedral bond angle
        half = math.radians(109.47) / 2
        dx, dy = 1.5 * math.sin(half), 1.5 * math.cos(half)
        pos = np.array([[0, 0, 0], [dx, dy, 0], [2 * dx, 0, 0], [3 * dx, dy, 0]], dtype=float)
        return np.full(4, 6), pos - pos.mean(axis=0)
    raise ValueError(f"unknown template {name!r}; expected tetrahedral, planar_hex or chain")


def pair_energy(pos, cutoff: float = 5.0) -> float:
    """Sum of ``1/r`` over atom pairs closer than ``cutoff``."""
    pos = np.asarray(pos)
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    iu = np.triu_indices(len(pos), 1)
    d = d[iu]
    return float(np.sum(1.0 / d[d <= cutoff]))


@dataclass
class Dataset:
    molecules: list[Molecule]
    split: np.ndarray = field(default=None)  # 0 train, 1 val, 2 test
    provenance: str = ""

    def __post_init__(self):
        if self.split is None:
            self.split = np.zeros(len(self.molecules), dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        if len(self.split) != len(self.molecules):
            raise ValueError("split assignment length differs from molecule count")

    def __len__(self) -> int:
        return len(self.molecules)

    def subset(self, name: str) -> list[Molecule]:
        k = SPLITS.index(name)
        return [m for m, s in zip(self.molecules, self.split) if s == k]


def gen_synthetic(name: str, count: int, jitter: float, seed: int | np.random.Generator = 0, cutoff: float = 5.0) -> Dataset:
    """Randomly rotated copies of a rigid template with isotropic Gaussian jitter.

    ``jitter`` is the per-coordinate standard deviation in angstrom. The
    label is :func:`pair_energy` of the jittered geometry.
    """
    if not 0 <= jitter < 0.2:
        raise ValueError("jitter must lie in [0, 0.2) angstrom")
    z, ref = template(name)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mols = []
    for _ in range(count):
        pos = ref + jitter * rng.normal(size=ref.shape)
        pos = pos @ random_rotation(rng).T
        mols.append(Molecule(z.copy(), pos, pair_energy(pos, cutoff)))
    return Dataset(mols, provenance=f"synthetic:{name}:count={count}:jitter={jitter}:seed={seed if isinstance(seed, int) else 'rng'}")


def split(ds: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Shuffled train/val/test assignment; sizes are floor-rounded with the remainder to train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    assign = np.zeros(n, dtype=np.int64)
    assign[order[n - n_val - n_test : n - n_test]] = 1
    assign[order[n - n_test :]] = 2
    return Dataset(ds.molecules, assign, ds.provenance)


# --------------------------------------------------------------------------
# dataset cache (checkpoint container)
# --------------------------------------------------------------------------


def save_dataset(path, ds: Dataset) -> None:
    from .checkpoint import write_container

    energies = np.array([np.nan if m.energy is None else m.energy for m in ds.molecules])
    write_container(
        path,
        {
            "n_atoms": np.array([len(m) for m in ds.molecules], dtype=np.float64),
            "z": np.concatenate([m.z for m in ds.molecules]).astype(np.float64) if ds.molecules else np.zeros(0),
            "pos": np.concatenate([m.pos for m in ds.molecules]) if ds.molecules else np.zeros((0, 3)),
            "energy": energies,
            "split": ds.split.astype(np.float64),
        },
        text={"provenance": ds.provenance},
    )


def load_dataset(path) -> Dataset:
    from .checkpoint import read_container

    arrays, text = read_container(path)
    counts = arrays["n_atoms"].astype(np.int64)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    mols = []
    for k in range(len(counts)):
        a, b = bounds[k], bounds[k + 1]
        e = arrays["energy"][k]
        mols.append(Molecule(arrays["z"][a:b].astype(np.int64), arrays["pos"][a:b], None if np.isnan(e) else float(e)))
    return Dataset(mols, arrays["split"].astype(np.int64), text.get("provenance", ""))


def load_any(path) -> Dataset:
    """Dataset cache or XYZ file, by content."""
    from .checkpoint import MAGIC

    p = Path(path)
    with open(p, "rb") as fh:
        head = fh.read(len(MAGIC))
    if head == MAGIC:
        return load_dataset(p)
    return Dataset(read_xyz(p), provenance=str(p))
