"""Molecular graph types shared by every other module."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

import numpy as np

SUPPORTED_ELEMENTS = ("H", "C", "N", "O", "S", "F", "Cl", "Si", "Br")
ELEMENT_INDEX = {el: i for i, el in enumerate(SUPPORTED_ELEMENTS)}

# Largest bond-order sum an atom may carry (aromatic bonds count 1.5).
MAX_VALENCE = {"H": 1, "C": 4, "N": 4, "O": 2, "S": 6, "F": 1, "Cl": 1, "Si": 4, "Br": 1}


class BondOrder(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    AROMATIC = "aromatic"

    @property
    def valence(self) -> float:
        return _ORDER_VALENCE[self]

    @classmethod
    def coerce(cls, value) -> "BondOrder":
        """Accept enum members, names (``"double"``) or numeric orders (``2``, ``1.5``)."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls(value.lower())
            except ValueError:
                pass
        else:
            for member, val in _ORDER_VALENCE.items():
                if float(value) == val:
                    return member
        raise ValueError(f"unknown bond order {value!r}")


_ORDER_VALENCE = {
    BondOrder.SINGLE: 1.0,
    BondOrder.DOUBLE: 2.0,
    BondOrder.TRIPLE: 3.0,
    BondOrder.AROMATIC: 1.5,
}


class GraphError(ValueError):
    """Raised when a graph violates one of the structural invariants."""


@dataclass(frozen=True)
class AtomNode:
    index: int
    element: str


@dataclass(frozen=True)
class BondEdge:
    i: int
    j: int
    order: BondOrder = BondOrder.SINGLE
    z_shift: int = 0

    def key(self) -> tuple[int, int, int]:
        """Orientation-independent identity: (i, j, s) and (j, i, -s) are the same bond."""
        if self.i < self.j:
            return (self.i, self.j, self.z_shift)
        if self.i > self.j:
            return (self.j, self.i, -self.z_shift)
        return (self.i, self.j, abs(self.z_shift))


@dataclass(frozen=True)
class MolecularGraph:
    atoms: tuple[AtomNode, ...]
    bonds: tuple[BondEdge, ...]
    periodic: bool = False
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "bonds", tuple(self.bonds))

    @classmethod
    def from_lists(cls, elements, bonds, periodic=False) -> "MolecularGraph":
        """Build from plain lists; ``bonds`` holds ``(i, j)``, ``(i, j, order)`` or ``(i, j, order, z_shift)``."""
        atoms = tuple(AtomNode(k, el) for k, el in enumerate(elements))
        edges = []
        for b in bonds:
            i, j = int(b[0]), int(b[1])
            order = BondOrder.coerce(b[2]) if len(b) > 2 else BondOrder.SINGLE
            shift = int(b[3]) if len(b) > 3 else 0
            edges.append(BondEdge(i, j, order, shift))
        return cls(atoms, tuple(edges), bool(periodic))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    def validate(self) -> "MolecularGraph":
        n = self.n_atoms
        for k, atom in enumerate(self.atoms):
            if atom.index != k:
                raise GraphError(f"atom indices must be contiguous from 0; got {atom.index} at {k}")
            if atom.element not in ELEMENT_INDEX:
                raise GraphError(f"unsupported element {atom.element!r}")
        seen = set()
        for b in self.bonds:
            if not (0 <= b.i < n and 0 <= b.j < n):
                raise GraphError(f"bond {b} references a missing atom")
            if b.z_shift not in (-1, 0, 1):
                raise GraphError(f"z_shift must be in {{-1, 0, 1}}, got {b.z_shift}")
            if b.i == b.j and b.z_shift == 0:
                raise GraphError(f"self bond on atom {b.i} without an image shift")
            if not self.periodic and b.z_shift != 0:
                raise GraphError("non-periodic graph carries a bond with z_shift != 0")
            if b.key() in seen:
                raise GraphError(f"duplicate bond {b.key()}")
            seen.add(b.key())
        for k, total in enumerate(self.valences()):
            el = self.atoms[k].element
            if total > MAX_VALENCE[el] + 1e-9:
                raise GraphError(f"atom {k} ({el}) exceeds valence {MAX_VALENCE[el]}: {total:g}")
        if self.periodic:
            if not any(b.z_shift != 0 for b in self.bonds):
                raise GraphError("periodic graph has no bond crossing the z boundary")
            if not self.is_connected():
                raise GraphError("periodic graph is not connected")
        return self

    def valences(self) -> np.ndarray:
        total = np.zeros(self.n_atoms)
        for b in self.bonds:
            total[b.i] += b.order.valence
            total[b.j] += b.order.valence
        return total

    def adjacency(self) -> np.ndarray:
        """Multigraph adjacency of the quotient graph; periodic bonds count as ordinary edges."""
        if "adj" not in self._cache:
            a = np.zeros((self.n_atoms, self.n_atoms))
            for b in self.bonds:
                a[b.i, b.j] += 1.0
                a[b.j, b.i] += 1.0
            a.setflags(write=False)
            self._cache["adj"] = a
        return self._cache["adj"]

    def neighbor_sets(self) -> list[set[int]]:
        nbrs = [set() for _ in range(self.n_atoms)]
        for b in self.bonds:
            nbrs[b.i].add(b.j)
            nbrs[b.j].add(b.i)
        return nbrs

    def edge_set(self) -> frozenset:
        """Simple quotient adjacency as unordered pairs, self pairs kept for image self-bonds."""
        return frozenset((min(b.i, b.j), max(b.i, b.j)) for b in self.bonds)

    def is_connected(self) -> bool:
        if self.n_atoms == 0:
            return True
        nbrs = self.neighbor_sets()
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in nbrs[u] - seen:
                seen.add(v)
                queue.append(v)
        return len(seen) == self.n_atoms

    def shortest_paths(self) -> np.ndarray:
        """All-pairs unweighted hop counts on the quotient graph (-1 where unreachable)."""
        if "spd" not in self._cache:
            n = self.n_atoms
            nbrs = self.neighbor_sets()
            dist = np.full((n, n), -1, dtype=np.int64)
            for src in range(n):
                dist[src, src] = 0
                queue = deque([src])
                while queue:
                    u = queue.popleft()
                    for v in nbrs[u]:
                        if dist[src, v] < 0:
                            dist[src, v] = dist[src, u] + 1
                            queue.append(v)
            dist.setflags(write=False)
            self._cache["spd"] = dist
        return self._cache["spd"]

    def permute(self, perm) -> "MolecularGraph":
        """Relabel atoms so that new atom ``k`` is old atom ``perm[k]``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        atoms = tuple(AtomNode(k, self.atoms[old].element) for k, old in enumerate(perm))
        bonds = tuple(BondEdge(inv[b.i], inv[b.j], b.order, b.z_shift) for b in self.bonds)
        return MolecularGraph(atoms, bonds, self.periodic)

    def without_bond(self, index: int) -> "MolecularGraph":
        bonds = self.bonds[:index] + self.bonds[index + 1:]
        return MolecularGraph(self.atoms, bonds, self.periodic)

    def formula(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for el in self.elements:
            counts[el] = counts.get(el, 0) + 1
        return counts


def disjoint_union(graphs) -> MolecularGraph:
    """Merge graphs into one graph with disconnected components (periodic if any input is)."""
    atoms, bonds, offset = [], [], 0
    for g in graphs:
        atoms.extend(AtomNode(a.index + offset, a.element) for a in g.atoms)
        bonds.extend(BondEdge(b.i + offset, b.j + offset, b.order, b.z_shift) for b in g.bonds)
        offset += g.n_atoms
    return MolecularGraph(tuple(atoms), tuple(bonds), any(g.periodic for g in graphs))
