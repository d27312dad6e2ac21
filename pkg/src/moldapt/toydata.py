"""Seeded synthetic corpus and labeled toy dataset.

Molecules are assembled as random trees over {C, N, O, S} with occasional
double bonds, ring closures, and phenyl attachments, then emitted as
canonical SMILES - every string parses by construction. The labeled
dataset's target is a fixed linear combination of standardized reference
descriptors plus seeded Gaussian noise, which makes descriptor-aware
training objectives demonstrably useful downstream.
"""

from __future__ import annotations

import csv
import random

import numpy as np

from .features import DESCRIPTOR_NAMES, apply_scaler, descriptor_matrix, fit_scaler
from .molgraph import Atom, Bond, Molecule, canonical_smiles, parse_smiles

_CAPACITY = {"C": 4, "N": 3, "O": 2, "S": 2}
_ELEMENT_POOL = ["C"] * 14 + ["N"] * 3 + ["O"] * 2 + ["S"]

# fixed target weights over the reference descriptor set
TARGET_WEIGHTS = {
    "molecular_weight": 0.8,
    "rotatable_bond_count": -0.5,
    "aromatic_atom_count": 0.6,
    "hbd_count": 0.4,
}


def random_molecule(rng: random.Random) -> Molecule:
    n = rng.randint(5, 14)
    atoms = [Atom(element=rng.choice(_ELEMENT_POOL), index=0)]
    bonds: list[Bond] = []
    spare = [_CAPACITY[atoms[0].element]]
    for i in range(1, n):
        candidates = [j for j in range(i) if spare[j] >= 1]
        if not candidates:
            break
        parent = rng.choice(candidates)
        el = rng.choice(_ELEMENT_POOL)
        atoms.append(Atom(element=el, index=len(atoms)))
        bonds.append(Bond(parent, len(atoms) - 1, "single"))
        spare[parent] -= 1
        spare.append(_CAPACITY[el] - 1)

    # occasional double bond where both endpoints still have capacity
    for b in bonds:
        if rng.random() < 0.15 and spare[b.a] >= 1 and spare[b.b] >= 1 \
                and atoms[b.a].element != "S" and atoms[b.b].element != "S":
            b.order = "double"
            spare[b.a] -= 1
            spare[b.b] -= 1

    # occasional aliphatic ring closure between non-adjacent atoms
    if rng.random() < 0.4:
        adjacent = {frozenset((b.a, b.b)) for b in bonds}
        pairs = [(i, j) for i in range(len(atoms)) for j in range(i + 2, len(atoms))
                 if spare[i] >= 1 and spare[j] >= 1
                 and frozenset((i, j)) not in adjacent]
        if pairs:
            i, j = rng.choice(pairs)
            bonds.append(Bond(i, j, "single"))
            spare[i] -= 1
            spare[j] -= 1

    # occasional phenyl substituent
    if rng.random() < 0.35:
        anchors = [i for i in range(len(atoms)) if spare[i] >= 1]
        if anchors:
            anchor = rng.choice(anchors)
            base = len(atoms)
            for k in range(6):
                atoms.append(Atom(element="C", aromatic=True, index=base + k))
            for k in range(6):
                bonds.append(Bond(base + k, base + (k + 1) % 6, "aromatic"))
            bonds.append(Bond(anchor, base, "single"))
            spare[anchor] -= 1

    return Molecule(atoms=atoms, bonds=bonds)


def generate_corpus(n: int, seed: int) -> list[str]:
    """``n`` distinct valid SMILES strings."""
    rng = random.Random(seed)
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        smi = canonical_smiles(random_molecule(rng))
        if smi in seen:
            continue
        parse_smiles(smi)  # self-check: every emitted string parses
        seen.add(smi)
        out.append(smi)
    return out


def generate_labeled(n: int, seed: int, noise: float = 0.1):
    """Returns (smiles, targets) with a descriptor-derived target."""
    smiles = generate_corpus(n, seed)
    desc = descriptor_matrix([parse_smiles(s) for s in smiles])
    scaler = fit_scaler(desc, DESCRIPTOR_NAMES)
    scaled = apply_scaler(desc, scaler)
    w = np.array([TARGET_WEIGHTS.get(name, 0.0) for name in scaler.names])
    rng = np.random.default_rng(seed + 1)
    target = scaled @ w + noise * rng.standard_normal(n)
    return smiles, target


def write_corpus(path, smiles: list[str]) -> None:
    with open(path, "w") as f:
        for s in smiles:
            f.write(s + "\n")


def write_labeled_csv(path, smiles: list[str], target: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["smiles", "target"])
        for s, t in zip(smiles, target):
            w.writerow([s, f"{t:.10g}"])
