"""SMILES parsing, canonicalization, and enumeration.

The grammar covers the organic subset, bracket atoms (isotope, charge,
explicit hydrogens), single/double/triple/aromatic bonds, branches, ring
closures including ``%nn``, and stereo markers (accepted and discarded).
Dot-disconnected inputs are rejected.

Valence bookkeeping uses a fixed table (documented below). Aromatic flags
are taken verbatim from lowercase input; no aromaticity perception or
kekulization is performed. An aromatic atom is charged one unit of valence
for ring-delocalization on top of one unit per aromatic bond, so e.g. a
benzene carbon uses 2 (aromatic bonds) + 1 = 3 of its 4 valences and gets
one implicit hydrogen.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx

from .errors import (
    MultiFragment,
    SmilesError,
    UnbalancedBranch,
    UnclosedRing,
    UnknownElement,
    ValenceViolation,
)

ELEMENTS = {"H", "B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Se", "Br", "I"}

# Allowed valences per element; the smallest value that fits the bonds
# present is used when assigning implicit hydrogens.
VALENCES = {
    "H": (1,),
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "F": (1,),
    "Si": (4,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "Cl": (1,),
    "Se": (2,),
    "Br": (1,),
    "I": (1,),
}

# Elements that may be written bare (outside brackets). Aromatic lowercase
# forms are restricted to b, c, n, o, p, s.
ORGANIC_SUBSET = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
AROMATIC_BRACKET = {"b", "c", "n", "o", "p", "s", "se"}

BOND_ORDER_VALUE = {"single": 1, "double": 2, "triple": 3, "aromatic": 1}
BOND_SYMBOL = {"-": "single", "=": "double", "#": "triple", ":": "aromatic",
               "/": "single", "\\": "single"}


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: Optional[int] = None  # set iff the atom came from a bracket
    isotope: Optional[int] = None
    index: int = -1


@dataclass
class Bond:
    a: int
    b: int
    order: str  # single | double | triple | aromatic

    def other(self, idx: int) -> int:
        return self.b if idx == self.a else self.a


@dataclass
class Molecule:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)
    rings: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self._neighbors: Optional[list[list[tuple[int, Bond]]]] = None

    def neighbors(self, idx: int) -> list[tuple[int, Bond]]:
        if self._neighbors is None:
            nbrs: list[list[tuple[int, Bond]]] = [[] for _ in self.atoms]
            for bond in self.bonds:
                nbrs[bond.a].append((bond.b, bond))
                nbrs[bond.b].append((bond.a, bond))
            self._neighbors = nbrs
        return self._neighbors[idx]

    def degree(self, idx: int) -> int:
        return len(self.neighbors(idx))

    def used_valence(self, idx: int) -> int:
        atom = self.atoms[idx]
        used = sum(BOND_ORDER_VALUE[b.order] for _, b in self.neighbors(idx))
        if atom.aromatic:
            used += 1
        return used

    def implicit_h(self, idx: int) -> int:
        """Implicit hydrogens from the valence table; 0 for bracket atoms."""
        atom = self.atoms[idx]
        if atom.explicit_h is not None:
            return 0
        used = self.used_valence(idx)
        for v in VALENCES[atom.element]:
            if used <= v:
                return v - used
        raise ValenceViolation(
            f"atom {idx} ({atom.element}) uses valence {used}, "
            f"max allowed {max(VALENCES[atom.element])}"
        )

    def total_h(self, idx: int) -> int:
        atom = self.atoms[idx]
        if atom.explicit_h is not None:
            return atom.explicit_h
        return self.implicit_h(idx)

    def ring_bond_flags(self) -> list[bool]:
        """True for every bond that lies on a cycle (i.e. is not a bridge)."""
        g = to_networkx(self)
        bridges = set(frozenset(e) for e in nx.bridges(g)) if len(self.bonds) else set()
        return [frozenset((b.a, b.b)) not in bridges for b in self.bonds]

    def ring_atom_flags(self) -> list[bool]:
        flags = [False] * len(self.atoms)
        for bond, in_ring in zip(self.bonds, self.ring_bond_flags()):
            if in_ring:
                flags[bond.a] = True
                flags[bond.b] = True
        return flags


def to_networkx(m: Molecule) -> nx.Graph:
    g = nx.Graph()
    for atom in m.atoms:
        g.add_node(atom.index, element=atom.element, aromatic=atom.aromatic,
                   charge=atom.formal_charge)
    for bond in m.bonds:
        g.add_edge(bond.a, bond.b, order=bond.order)
    return g


def isomorphic(a: Molecule, b: Molecule) -> bool:
    """Graph isomorphism respecting element, aromaticity, charge, H count."""
    ga, gb = to_networkx(a), to_networkx(b)
    for g, m in ((ga, a), (gb, b)):
        for i in g.nodes:
            g.nodes[i]["h"] = m.total_h(i)
    return nx.is_isomorphic(
        ga, gb,
        node_match=lambda x, y: (x["element"], x["aromatic"], x["charge"], x["h"])
        == (y["element"], y["aromatic"], y["charge"], y["h"]),
        edge_match=lambda x, y: x["order"] == y["order"],
    )


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _parse_bracket(text: str, pos: int) -> tuple[Atom, int]:
    """Parse a bracket atom starting at text[pos] == '['; returns (atom, end)."""
    end = text.find("]", pos)
    if end < 0:
        raise SmilesError(f"unterminated bracket at position {pos}")
    body = text[pos + 1:end]
    i = 0
    isotope = None
    while i < len(body) and body[i].isdigit():
        i += 1
    if i > 0:
        isotope = int(body[:i])
    # element symbol: two-letter first, then one-letter, case-sensitive
    aromatic = False
    element = None
    for cand in (body[i:i + 2], body[i:i + 1]):
        if not cand:
            continue
        sym = cand[0].upper() + cand[1:]
        if cand[0].islower():
            if cand in AROMATIC_BRACKET:
                element, aromatic = cand.capitalize(), True
                i += len(cand)
                break
            continue
        if sym in ELEMENTS and cand == sym:
            element = sym
            i += len(cand)
            break
    if element is None:
        raise UnknownElement(f"unknown element in bracket [{body}]")
    # stereo markers: accepted and discarded
    while i < len(body) and body[i] == "@":
        i += 1
        if i < len(body) and body[i : i + 1] in ("T", "A", "S", "O"):  # @TH1 etc.
            while i < len(body) and body[i].isalnum() and body[i] != "H":
                i += 1
    hcount = 0
    if i < len(body) and body[i] == "H":
        i += 1
        j = i
        while j < len(body) and body[j].isdigit():
            j += 1
        hcount = int(body[i:j]) if j > i else 1
        i = j
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        i += 1
        j = i
        while j < len(body) and body[j].isdigit():
            j += 1
        if j > i:
            charge = sign * int(body[i:j])
            i = j
        else:
            charge = sign
            while i < len(body) and body[i] in "+-":
                charge += sign
                i += 1
    if i != len(body):
        raise SmilesError(f"unparsed bracket content in [{body}]")
    atom = Atom(element=element, aromatic=aromatic, formal_charge=charge,
                explicit_h=hcount, isotope=isotope)
    return atom, end + 1


def parse_smiles(text: str) -> Molecule:
    """Parse a single-component SMILES string into a molecular graph."""
    if not text:
        raise SmilesError("empty SMILES")
    mol = Molecule()
    stack: list[int] = []
    prev: Optional[int] = None
    pending_bond: Optional[str] = None
    ring_open: dict[int, tuple[int, Optional[str]]] = {}
    pos = 0
    n = len(text)

    def add_atom(atom: Atom) -> None:
        nonlocal prev, pending_bond
        atom.index = len(mol.atoms)
        mol.atoms.append(atom)
        if prev is not None:
            order = pending_bond
            if order is None:
                order = ("aromatic"
                         if mol.atoms[prev].aromatic and atom.aromatic
                         else "single")
            _check_aromatic_bond(mol, prev, atom.index, order)
            mol.bonds.append(Bond(prev, atom.index, order))
        prev = atom.index
        pending_bond = None

    def close_ring(digit: int) -> None:
        nonlocal pending_bond
        if prev is None:
            raise SmilesError("ring closure before any atom")
        if digit in ring_open:
            start, open_bond = ring_open.pop(digit)
            if start == prev:
                raise SmilesError(f"ring closure {digit} to the same atom")
            order = pending_bond if pending_bond is not None else open_bond
            if order is None:
                order = ("aromatic"
                         if mol.atoms[start].aromatic and mol.atoms[prev].aromatic
                         else "single")
            _check_aromatic_bond(mol, start, prev, order)
            mol.bonds.append(Bond(start, prev, order))
        else:
            ring_open[digit] = (prev, pending_bond)
        pending_bond = None

    while pos < n:
        ch = text[pos]
        if ch == ".":
            raise MultiFragment("multi-fragment SMILES are not supported")
        if ch == "(":
            if prev is None:
                raise UnbalancedBranch("branch before any atom")
            stack.append(prev)
            pos += 1
        elif ch == ")":
            if not stack:
                raise UnbalancedBranch("unmatched ')'")
            prev = stack.pop()
            pos += 1
        elif ch in BOND_SYMBOL:
            if pending_bond is not None:
                raise SmilesError("two consecutive bond symbols")
            pending_bond = BOND_SYMBOL[ch]
            pos += 1
        elif ch == "%":
            if pos + 2 >= n or not text[pos + 1:pos + 3].isdigit():
                raise SmilesError("'%' must be followed by two digits")
            close_ring(int(text[pos + 1:pos + 3]))
            pos += 3
        elif ch.isdigit():
            close_ring(int(ch))
            pos += 1
        elif ch == "[":
            atom, pos = _parse_bracket(text, pos)
            add_atom(atom)
        elif ch.isalpha():
            two = text[pos:pos + 2]
            if two in ("Cl", "Br"):
                add_atom(Atom(element=two))
                pos += 2
            elif ch in AROMATIC_ORGANIC:
                add_atom(Atom(element=ch.upper(), aromatic=True))
                pos += 1
            elif ch.upper() in ORGANIC_SUBSET and ch.isupper():
                add_atom(Atom(element=ch))
                pos += 1
            else:
                raise UnknownElement(f"unknown atom symbol {ch!r} at position {pos}")
        else:
            raise SmilesError(f"unexpected character {ch!r} at position {pos}")

    if stack:
        raise UnbalancedBranch(f"{len(stack)} unclosed branch(es)")
    if ring_open:
        raise UnclosedRing(f"unclosed ring closure(s): {sorted(ring_open)}")
    if not mol.atoms:
        raise SmilesError("no atoms parsed")

    for i in range(len(mol.atoms)):
        mol.implicit_h(i)  # raises ValenceViolation on overfilled atoms

    mol.rings = _sssr(mol)
    return mol


def _check_aromatic_bond(mol: Molecule, a: int, b: int, order: str) -> None:
    if order == "aromatic" and not (mol.atoms[a].aromatic and mol.atoms[b].aromatic):
        raise SmilesError("aromatic bond between non-aromatic atoms")


def _sssr(mol: Molecule) -> list[list[int]]:
    """Smallest set of smallest rings via a minimum cycle basis."""
    if len(mol.bonds) < len(mol.atoms):  # acyclic (connected graph)
        return []
    g = to_networkx(mol)
    rings = []
    for cycle in nx.minimum_cycle_basis(g):
        rings.append(_order_cycle(g, cycle))
    rings.sort(key=lambda r: (len(r), r))
    return rings


def _order_cycle(g: nx.Graph, nodes: list[int]) -> list[int]:
    """Arrange a cycle-basis node set into traversal order where possible."""
    node_set = set(nodes)
    sub = g.subgraph(node_set)
    if not all(sub.degree(v) == 2 for v in node_set):
        return sorted(nodes)  # fused/bridged basis element; keep as a set
    start = min(node_set)
    order = [start]
    prev_node, cur = None, start
    while len(order) < len(node_set):
        nxt = [v for v in sub.neighbors(cur) if v != prev_node][0]
        order.append(nxt)
        prev_node, cur = cur, nxt
    return order


# ---------------------------------------------------------------------------
# Canonical ranking and SMILES emission
# ---------------------------------------------------------------------------

def canonical_ranks(m: Molecule) -> list[int]:
    """Order-invariant atom ranks via iterative neighborhood refinement.

    Initial invariant: (element, degree, charge, H count, aromatic, isotope).
    Refinement folds in sorted neighbor (bond order, rank) pairs until the
    partition stabilizes; remaining ties are broken one atom at a time from
    the lowest-ranked tied class.
    """
    n = len(m.atoms)
    invariants = [
        (a.element, m.degree(i), a.formal_charge, m.total_h(i), a.aromatic,
         a.isotope or 0)
        for i, a in enumerate(m.atoms)
    ]
    ranks = _ranks_from_keys(invariants)

    def refine(ranks: list[int]) -> list[int]:
        while True:
            keys = []
            for i in range(n):
                nbr = sorted((BOND_ORDER_VALUE[b.order], b.order, ranks[j])
                             for j, b in m.neighbors(i))
                keys.append((ranks[i], tuple(nbr)))
            new = _ranks_from_keys(keys)
            if new == ranks:
                return new
            ranks = new

    ranks = refine(ranks)
    while len(set(ranks)) < n:
        # break the lowest tied class; tied atoms are (near-)equivalent, so
        # promoting one member is canonical up to graph automorphism
        tied_rank = min(r for r in ranks if ranks.count(r) > 1)
        chosen = min(i for i in range(n) if ranks[i] == tied_rank)
        keys = [(ranks[i], 0 if i == chosen else 1) for i in range(n)]
        ranks = refine(_ranks_from_keys(keys))
    return ranks


def _ranks_from_keys(keys: list) -> list[int]:
    order = sorted(set(keys))
    lookup = {k: r for r, k in enumerate(order)}
    return [lookup[k] for k in keys]


def _atom_token(m: Molecule, idx: int) -> str:
    atom = m.atoms[idx]
    sym = atom.element.lower() if atom.aromatic else atom.element
    needs_bracket = (
        atom.explicit_h is not None
        or atom.formal_charge != 0
        or atom.isotope is not None
        or (atom.aromatic and atom.element == "Se")
        or (not atom.aromatic and atom.element not in ORGANIC_SUBSET)
        or (atom.aromatic and atom.element.lower() not in AROMATIC_ORGANIC
            and atom.element != "Se")
    )
    if not needs_bracket:
        return sym
    parts = ["["]
    if atom.isotope is not None:
        parts.append(str(atom.isotope))
    parts.append(sym)
    h = atom.explicit_h if atom.explicit_h is not None else m.implicit_h(idx)
    if h == 1:
        parts.append("H")
    elif h > 1:
        parts.append(f"H{h}")
    c = atom.formal_charge
    if c == 1:
        parts.append("+")
    elif c == -1:
        parts.append("-")
    elif c > 1:
        parts.append(f"+{c}")
    elif c < -1:
        parts.append(f"-{-c}")
    parts.append("]")
    return "".join(parts)


def _bond_token(m: Molecule, bond: Bond) -> str:
    if bond.order == "single":
        # explicit '-' keeps a single bond between two aromatic atoms from
        # being re-parsed as aromatic
        if m.atoms[bond.a].aromatic and m.atoms[bond.b].aromatic:
            return "-"
        return ""
    if bond.order == "double":
        return "="
    if bond.order == "triple":
        return "#"
    return ""  # aromatic: implicit between aromatic atoms


def write_smiles(m: Molecule, root: int, neighbor_order) -> str:
    """Emit SMILES by DFS from ``root``; ``neighbor_order(atom, nbrs)`` sorts
    the unvisited neighbor list and fixes the traversal."""
    visited = [False] * len(m.atoms)
    ring_digit: dict[tuple[int, int], int] = {}
    next_digit = [1]

    # first pass: find back edges (ring closures) under this traversal
    tree_children: dict[int, list[tuple[int, Bond]]] = {}
    closures: dict[int, list[Bond]] = {i: [] for i in range(len(m.atoms))}
    seen_edges: set[frozenset] = set()

    def discover(i: int) -> None:
        visited[i] = True
        nbrs = [(j, b) for j, b in m.neighbors(i)
                if frozenset((i, j)) not in seen_edges]
        nbrs = neighbor_order(i, nbrs)
        tree_children[i] = []
        for j, b in nbrs:
            edge = frozenset((i, j))
            if edge in seen_edges:
                continue
            if visited[j]:
                seen_edges.add(edge)
                closures[i].append(b)
                closures[j].append(b)
            else:
                seen_edges.add(edge)
                tree_children[i].append((j, b))
                discover(j)

    import sys
    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 4 * len(m.atoms) + 100))
    try:
        discover(root)
    finally:
        sys.setrecursionlimit(old_limit)

    out: list[str] = []

    def emit(i: int) -> None:
        out.append(_atom_token(m, i))
        for b in closures[i]:
            edge = (min(b.a, b.b), max(b.a, b.b))
            if edge not in ring_digit:
                ring_digit[edge] = next_digit[0]
                next_digit[0] += 1
                out.append(_bond_token(m, b))
            d = ring_digit[edge]
            out.append(str(d) if d < 10 else f"%{d:02d}")
        children = tree_children[i]
        for k, (j, b) in enumerate(children):
            last = k == len(children) - 1
            if not last:
                out.append("(")
            out.append(_bond_token(m, b))
            emit(j)
            if not last:
                out.append(")")

    sys.setrecursionlimit(max(old_limit, 4 * len(m.atoms) + 100))
    try:
        emit(root)
    finally:
        sys.setrecursionlimit(old_limit)
    return "".join(out)


def canonical_smiles(m: Molecule) -> str:
    """Deterministic SMILES, invariant under input atom ordering."""
    ranks = canonical_ranks(m)
    root = ranks.index(min(ranks))

    def order(_i: int, nbrs):
        return sorted(nbrs, key=lambda jb: ranks[jb[0]])

    return write_smiles(m, root, order)


def enumerate_smiles(m: Molecule, seed: int) -> str:
    """A randomized but valid SMILES for the same molecule."""
    rng = random.Random(int(seed))
    root = rng.randrange(len(m.atoms))

    def order(_i: int, nbrs):
        nbrs = list(nbrs)
        rng.shuffle(nbrs)
        return nbrs

    return write_smiles(m, root, order)
