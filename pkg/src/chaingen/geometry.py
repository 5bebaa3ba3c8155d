"""Orthogonal-cell coordinates and internal coordinates under z periodicity.

Only z is periodic.  The x/y edges are fixed at 55 Angstrom and treated as
aperiodic because the box isolates a single chain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .chemgraph.graph import BondEdge, BondOrder, AtomNode, MolecularGraph

BOX_XY = 55.0
BOND_FACTOR = 1.25
SHORT_BOND = 0.8


@dataclass(frozen=True)
class Cell:
    """Orthogonal cell with fixed 55 Angstrom x/y edges and a variable z height."""

    c: float

    def __post_init__(self):
        if not np.isfinite(self.c) or self.c <= 0:
            raise ValueError(f"cell height b_z must be positive and finite, got {self.c}")

    a = BOX_XY
    b = BOX_XY

    @property
    def b_z(self) -> float:
        return self.c

    @property
    def lengths(self) -> np.ndarray:
        return np.array([BOX_XY, BOX_XY, self.c])


@dataclass(frozen=True, eq=False)
class Structure:
    """Atom positions for a graph; periodic structures carry fractional coordinates and a cell."""

    graph: MolecularGraph
    cart: np.ndarray
    frac: np.ndarray | None = None
    cell: Cell | None = None
    id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        cart = np.array(self.cart, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "cart", cart)
        if self.frac is not None:
            object.__setattr__(self, "frac", np.array(self.frac, dtype=np.float64).reshape(-1, 3))
        if len(cart) != self.graph.n_atoms:
            raise ValueError(f"{len(cart)} coordinates for a graph of {self.graph.n_atoms} atoms")

    @property
    def periodic(self) -> bool:
        return self.cell is not None

    @property
    def n_atoms(self) -> int:
        return len(self.cart)

    @property
    def elements(self) -> list[str]:
        return self.graph.elements

    @classmethod
    def from_frac(cls, graph: MolecularGraph, frac, b_z: float, id: str = "") -> "Structure":
        cell = Cell(float(b_z))
        frac = wrap_frac(np.asarray(frac, dtype=np.float64))
        return cls(graph, frac_to_cart(frac, cell), frac, cell, id)

    @classmethod
    def from_cart(cls, graph: MolecularGraph, cart, b_z: float | None = None, id: str = "") -> "Structure":
        """Periodic when ``b_z`` is given (fractional z wrapped into [0, 1)), molecular otherwise."""
        cart = np.asarray(cart, dtype=np.float64)
        if b_z is None:
            return cls(graph, cart, None, None, id)
        cell = Cell(float(b_z))
        frac = wrap_frac(cart_to_frac(cart, cell))
        return cls(graph, frac_to_cart(frac, cell), frac, cell, id)

    def with_graph(self, graph: MolecularGraph) -> "Structure":
        return Structure(graph, self.cart, self.frac, self.cell, self.id, dict(self.meta))


def wrap_frac(frac: np.ndarray) -> np.ndarray:
    """Wrap the z column into [0, 1)."""
    out = np.array(frac, dtype=np.float64, copy=True)
    z = out[..., 2] - np.floor(out[..., 2])
    z[z >= 1.0] = 0.0
    out[..., 2] = z
    return out


def frac_to_cart(f, cell: Cell) -> np.ndarray:
    return np.asarray(f, dtype=np.float64) * cell.lengths


def cart_to_frac(p, cell: Cell) -> np.ndarray:
    return np.asarray(p, dtype=np.float64) / cell.lengths


def min_image_delta(pi, pj, cell: Cell | None) -> np.ndarray:
    """Displacement pj - pi with z wrapped into (-b_z/2, b_z/2]; plain difference without a cell."""
    d = np.asarray(pj, dtype=np.float64) - np.asarray(pi, dtype=np.float64)
    if cell is None:
        return d
    d = np.array(d, copy=True)
    bz = cell.c
    # ceil(x - 1/2) maps the tie at exactly +b_z/2 to itself
    d[..., 2] = d[..., 2] - bz * np.ceil(d[..., 2] / bz - 0.5)
    return d


def periodic_angle_diff(x, y):
    """Smallest separation between two angles in degrees, in [0, 180]."""
    r = np.mod(np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)), 360.0)
    return np.minimum(r, 360.0 - r)


# ----------------------------------------------------------------------------
# internal coordinates


@dataclass(frozen=True)
class InternalCoordinateSet:
    bonds: np.ndarray      # (nb, 3) i, j, z_shift
    angles: np.ndarray     # (na, 3) i, j, k  (j is the vertex)
    dihedrals: np.ndarray  # (nd, 4) i, j, k, l


@dataclass(frozen=True)
class InternalCoordinates:
    index: InternalCoordinateSet
    bond_lengths: np.ndarray   # Angstrom
    angles: np.ndarray         # degrees in [0, 180]
    dihedrals: np.ndarray      # degrees in [0, 360)
    degenerate: dict           # kind -> boolean mask of entries excluded from distributions

    def valid(self, kind: str) -> np.ndarray:
        values = {"bond": self.bond_lengths, "angle": self.angles, "dihedral": self.dihedrals}[kind]
        return values[~self.degenerate[kind]]


def enumerate_internal_coords(g: MolecularGraph) -> InternalCoordinateSet:
    """Bonds, bond angles and proper dihedrals of the (quotient) graph.

    Every neighbour slot carries the image shift of the neighbour, so paths
    through periodic bonds are told apart from paths within one image.
    """
    key = ("icset",)
    if key in g._cache:
        return g._cache[key]
    slots: list[list[tuple[int, int, int]]] = [[] for _ in range(g.n_atoms)]  # (nbr, shift, bond id)
    bonds = []
    for bid, b in enumerate(g.bonds):
        slots[b.i].append((b.j, b.z_shift, bid))
        slots[b.j].append((b.i, -b.z_shift, bid))
        bonds.append((b.i, b.j, b.z_shift))

    angles = []
    for j in range(g.n_atoms):
        s = slots[j]
        for a in range(len(s)):
            for c in range(a + 1, len(s)):
                i, k = s[a][0], s[c][0]
                if i == k:
                    continue
                angles.append((i, j, k))

    dihedrals = []
    for bid, b in enumerate(g.bonds):
        j, k, s_k = b.i, b.j, b.z_shift
        for i, s_i, b1 in slots[j]:
            if b1 == bid:
                continue
            for l, s_l, b3 in slots[k]:
                if b3 == bid:
                    continue
                nodes = {(i, s_i), (j, 0), (k, s_k), (l, s_k + s_l)}
                if len(nodes) == 4:
                    dihedrals.append((i, j, k, l))

    out = InternalCoordinateSet(
        np.array(bonds, dtype=np.int64).reshape(-1, 3),
        np.array(angles, dtype=np.int64).reshape(-1, 3),
        np.array(dihedrals, dtype=np.int64).reshape(-1, 4),
    )
    g._cache[key] = out
    return out


def _angle_deg(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    dot = np.sum(u * v, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def dihedral_deg(b1: np.ndarray, b2: np.ndarray, b3: np.ndarray) -> np.ndarray:
    """Signed IUPAC dihedral from consecutive bond vectors, mapped to [0, 360)."""
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    x = np.sum(n1 * n2, axis=-1)
    y = np.linalg.norm(b2, axis=-1) * np.sum(b1 * n2, axis=-1)
    deg = np.degrees(np.arctan2(y, x))
    deg = np.mod(deg, 360.0)
    return np.where(deg >= 360.0, 0.0, deg)


def internal_coords(s: Structure, eps: float = 1e-10) -> InternalCoordinates:
    """Measure every bond length, angle and dihedral of ``s`` through the minimum image."""
    idx = enumerate_internal_coords(s.graph)
    p, cell = s.cart, s.cell

    def vec(a, b):
        return min_image_delta(p[a], p[b], cell)

    bi = idx.bonds
    bvec = vec(bi[:, 0], bi[:, 1])
    blen = np.linalg.norm(bvec, axis=-1)
    bdeg = blen < eps

    ai = idx.angles
    u, v = vec(ai[:, 1], ai[:, 0]), vec(ai[:, 1], ai[:, 2])
    with np.errstate(invalid="ignore", divide="ignore"):
        ang = _angle_deg(u, v)
    adeg = (np.linalg.norm(u, axis=-1) < eps) | (np.linalg.norm(v, axis=-1) < eps)

    di = idx.dihedrals
    b1, b2, b3 = vec(di[:, 0], di[:, 1]), vec(di[:, 1], di[:, 2]), vec(di[:, 2], di[:, 3])
    with np.errstate(invalid="ignore", divide="ignore"):
        dih = dihedral_deg(b1, b2, b3)
    ddeg = (
        (np.linalg.norm(np.cross(b1, b2), axis=-1) < eps)
        | (np.linalg.norm(np.cross(b2, b3), axis=-1) < eps)
    )
    ang = np.where(adeg, np.nan, ang)
    dih = np.where(ddeg, np.nan, dih)
    blen = np.where(bdeg, np.nan, blen)
    return InternalCoordinates(idx, blen, ang, dih, {"bond": bdeg, "angle": adeg, "dihedral": ddeg})


# ----------------------------------------------------------------------------
# bond perception


@lru_cache(maxsize=None)
def covalent_radii() -> dict[str, float]:
    text = resources.files("chaingen.data").joinpath("covalent_radii.csv").read_text()
    rows = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
    return {r["element"]: float(r["radius"]) for r in rows}


def bond_cutoff(el_a: str, el_b: str, factor: float = BOND_FACTOR) -> float:
    radii = covalent_radii()
    return factor * (radii[el_a] + radii[el_b])


@dataclass(frozen=True)
class PerceivedBonds:
    graph: MolecularGraph
    lengths: np.ndarray  # one per graph bond
    shortest_contact: float  # closest pair of any kind, inf for a single atom


def perceive_bonds(elements, cart, cell: Cell | None = None, factor: float = BOND_FACTOR) -> PerceivedBonds:
    """Distance-based connectivity: a bond wherever an image pair is closer than ``factor`` x radius sum.

    Periodic inputs scan the z images -1, 0, +1 so that short cells still
    record every bonded image; when b_z exceeds twice the largest cutoff this
    is exactly the minimum-image rule.  Perceived bonds are single bonds.
    """
    elements = list(elements)
    p = np.asarray(cart, dtype=np.float64).reshape(-1, 3)
    n = len(elements)
    radii = covalent_radii()
    r = np.array([radii[e] for e in elements])
    cut = factor * (r[:, None] + r[None, :])
    shifts = (-1, 0, 1) if cell is not None else (0,)
    bonds: list[BondEdge] = []
    lengths: list[float] = []
    shortest = np.inf
    base = p[None, :, :] - p[:, None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    for s in shifts:
        d = base.copy()
        if s:
            d[..., 2] += s * cell.c
        dist = np.linalg.norm(d, axis=-1)
        # each unordered (i, j, s) once: i < j for every shift, plus i == j for s = +1
        mask = upper | np.eye(n, dtype=bool) if s == 1 else upper
        if mask.any():
            shortest = min(shortest, float(dist[mask].min()))
        for i, j in np.argwhere(mask & (dist < cut)):
            bonds.append(BondEdge(int(i), int(j), BondOrder.SINGLE, int(s)))
            lengths.append(float(dist[i, j]))
    graph = MolecularGraph(
        tuple(AtomNode(k, el) for k, el in enumerate(elements)), tuple(bonds), cell is not None
    )
    return PerceivedBonds(graph, np.array(lengths), float(shortest))


def perceive_structure(s: Structure, factor: float = BOND_FACTOR) -> PerceivedBonds:
    return perceive_bonds(s.elements, s.cart, s.cell, factor)


__all__ = [
    "BOX_XY", "BOND_FACTOR", "SHORT_BOND", "Cell", "Structure", "InternalCoordinateSet",
    "InternalCoordinates", "wrap_frac", "frac_to_cart", "cart_to_frac", "min_image_delta",
    "periodic_angle_diff", "enumerate_internal_coords", "internal_coords", "dihedral_deg",
    "covalent_radii", "bond_cutoff", "PerceivedBonds", "perceive_bonds", "perceive_structure",
]

