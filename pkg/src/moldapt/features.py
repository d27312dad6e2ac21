"""Physicochemical descriptors, standard scaling, and Morgan fingerprints.

The descriptor reference set is a fixed list of graph-derivable quantities
with exact formulas (see ``DESCRIPTOR_NAMES``); extended sets can be plugged
in since every consumer treats the dimension as data-driven.

Fingerprints use ECFP-style iterative neighborhood hashing with a fixed
64-bit mixing hash (splitmix64, repo-pinned seed) so bits are stable across
platforms and runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import InsufficientData, WidthMismatch
from .molgraph import Molecule

with resources.files("moldapt.data").joinpath("atomic_weights.json").open() as _f:
    _w = json.load(_f)
ATOMIC_WEIGHTS = {k: v for k, v in _w.items() if not k.startswith("_")}

HALOGENS = {"F", "Cl", "Br", "I"}

DESCRIPTOR_NAMES = [
    "molecular_weight",
    "heavy_atom_count",
    "carbon_count",
    "nitrogen_count",
    "oxygen_count",
    "sulfur_count",
    "halogen_count",
    "bond_count",
    "ring_count",
    "aromatic_atom_count",
    "aromatic_ring_count",
    "hbd_count",
    "hba_count",
    "rotatable_bond_count",
    "net_formal_charge",
    "fraction_sp3_carbon",
    "max_ring_size",
]


@dataclass
class DescriptorVector:
    values: np.ndarray
    names: list[str]


def compute_descriptors(m: Molecule) -> DescriptorVector:
    """Reference descriptor set; all quantities derive from the graph alone."""
    elements = [a.element for a in m.atoms]
    n_heavy = sum(1 for e in elements if e != "H")
    mw = sum(ATOMIC_WEIGHTS[e] for e in elements)
    mw += sum(m.total_h(i) for i in range(len(m.atoms))) * ATOMIC_WEIGHTS["H"]

    n_aromatic = sum(1 for a in m.atoms if a.aromatic)
    aromatic_rings = sum(
        1 for ring in m.rings if all(m.atoms[i].aromatic for i in ring)
    )
    hbd = sum(
        1 for i, a in enumerate(m.atoms)
        if a.element in ("N", "O") and m.total_h(i) >= 1
    )
    hba = sum(1 for a in m.atoms if a.element in ("N", "O"))

    ring_bond = m.ring_bond_flags()
    rotatable = 0
    for bond, in_ring in zip(m.bonds, ring_bond):
        if bond.order != "single" or in_ring:
            continue
        # both endpoints must be non-terminal heavy atoms
        if m.degree(bond.a) > 1 and m.degree(bond.b) > 1 \
                and m.atoms[bond.a].element != "H" and m.atoms[bond.b].element != "H":
            rotatable += 1

    carbons = [i for i, a in enumerate(m.atoms) if a.element == "C"]
    sp3 = sum(
        1 for i in carbons
        if not m.atoms[i].aromatic
        and all(b.order == "single" for _, b in m.neighbors(i))
    )
    frac_sp3 = sp3 / len(carbons) if carbons else 0.0

    values = np.array([
        mw,
        n_heavy,
        sum(1 for e in elements if e == "C"),
        sum(1 for e in elements if e == "N"),
        sum(1 for e in elements if e == "O"),
        sum(1 for e in elements if e == "S"),
        sum(1 for e in elements if e in HALOGENS),
        len(m.bonds),
        len(m.rings),
        n_aromatic,
        aromatic_rings,
        hbd,
        hba,
        rotatable,
        sum(a.formal_charge for a in m.atoms),
        frac_sp3,
        max((len(r) for r in m.rings), default=0),
    ], dtype=np.float64)
    return DescriptorVector(values=values, names=list(DESCRIPTOR_NAMES))


def descriptor_matrix(mols: list[Molecule]) -> np.ndarray:
    return np.stack([compute_descriptors(m).values for m in mols])


# ---------------------------------------------------------------------------
# Standard scaling
# ---------------------------------------------------------------------------

@dataclass
class ScalerStats:
    mean: np.ndarray           # over retained descriptors
    std: np.ndarray            # population std, > 0 for every retained column
    kept: np.ndarray           # indices of retained columns in the input
    names: list[str]

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "kept": self.kept.tolist(),
            "names": self.names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            kept=np.asarray(d["kept"], dtype=np.int64),
            names=list(d["names"]),
        )


def fit_scaler(matrix: np.ndarray, names: list[str] | None = None) -> ScalerStats:
    """Per-column mean/std; zero-variance columns are dropped and recorded."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise InsufficientData("scaler fit needs at least 2 rows")
    if names is None:
        names = [f"d{i}" for i in range(matrix.shape[1])]
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    kept = np.flatnonzero(std > 0)
    return ScalerStats(
        mean=mean[kept],
        std=std[kept],
        kept=kept,
        names=[names[i] for i in kept],
    )


def apply_scaler(matrix: np.ndarray, stats: ScalerStats) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    return (matrix[:, stats.kept] - stats.mean) / stats.std


# ---------------------------------------------------------------------------
# Morgan fingerprints
# ---------------------------------------------------------------------------

HASH_SEED = 0x9E3779B97F4A7C15  # repo-pinned

_ELEMENT_CODE = {e: i for i, e in enumerate(sorted(ATOMIC_WEIGHTS))}
_BOND_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}
_MASK64 = (1 << 64) - 1


def _mix(h: int) -> int:
    """splitmix64 finalizer."""
    h &= _MASK64
    h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    h = (h ^ (h >> 27)) * 0x94D049BB133111EB & _MASK64
    return h ^ (h >> 31)


def _hash_ints(values) -> int:
    h = HASH_SEED
    for v in values:
        h = _mix(h ^ (v & _MASK64))
    return h


@dataclass
class Fingerprint:
    bits: int      # bitmask, little-endian bit i = feature hash mod nbits == i
    nbits: int
    radius: int

    def popcount(self) -> int:
        return self.bits.bit_count()

    def to_array(self) -> np.ndarray:
        return np.array([(self.bits >> i) & 1 for i in range(self.nbits)],
                        dtype=np.uint8)


def morgan_fingerprint(m: Molecule, radius: int = 2, nbits: int = 2048) -> Fingerprint:
    """ECFP-style fingerprint from iterative neighborhood hashing."""
    ring_atom = m.ring_atom_flags()
    ids = [
        _hash_ints((
            _ELEMENT_CODE[a.element],
            m.degree(i),
            a.formal_charge + 8,
            m.total_h(i),
            int(a.aromatic),
            int(ring_atom[i]),
        ))
        for i, a in enumerate(m.atoms)
    ]
    bits = 0
    for h in ids:
        bits |= 1 << (h % nbits)
    for _ in range(radius):
        new_ids = []
        for i in range(len(m.atoms)):
            nbr = sorted((_BOND_CODE[b.order], ids[j]) for j, b in m.neighbors(i))
            parts = [ids[i]]
            for order, nh in nbr:
                parts.extend((order, nh))
            new_ids.append(_hash_ints(parts))
        ids = new_ids
        for h in ids:
            bits |= 1 << (h % nbits)
    return Fingerprint(bits=bits, nbits=nbits, radius=radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """|a AND b| / |a OR b|; 1.0 when both fingerprints are empty."""
    if a.nbits != b.nbits:
        raise WidthMismatch(f"fingerprint widths differ: {a.nbits} vs {b.nbits}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        return 1.0
    return (a.bits & b.bits).bit_count() / union
