"""Polymer-SMILES parser.

Handles the subset needed for repeat units: organic-subset and bracket atoms,
branches, numbered ring closures (including ``%nn``), explicit bond symbols
and lowercase aromatic atoms.  Two ``[*]`` wildcards mark the chain
attachment points; they are removed and their neighbours joined by a single
bond with ``z_shift=+1``.  Stereo marks, isotopes and charges are skipped.
"""

from __future__ import annotations

import math
import re

from .graph import (
    ELEMENT_INDEX,
    MAX_VALENCE,
    AtomNode,
    BondEdge,
    BondOrder,
    GraphError,
    MolecularGraph,
)

__all__ = ["SmilesError", "parse_smiles"]

# Valences tried in order when filling implicit hydrogens.
STANDARD_VALENCES = {
    "H": (1,), "C": (4,), "N": (3, 5), "O": (2,), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Si": (4,), "Br": (1,),
}
AROMATIC_SYMBOLS = {"c": "C", "n": "N", "o": "O", "s": "S"}
ORGANIC_SUBSET = ("Cl", "Br", "Si", "C", "N", "O", "S", "F", "H")
BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}

_BRACKET = re.compile(
    r"\[(?P<isotope>\d*)(?P<symbol>\*|[A-Z][a-z]?|[cnos])(?P<chiral>@*)"
    r"(?:H(?P<hcount>\d*))?(?P<charge>[+-]+\d*)?(?::\d+)?\]"
)


class SmilesError(ValueError):
    """Parse failure with the 0-based character position that triggered it."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class _Atom:
    __slots__ = ("element", "aromatic", "bracket", "hcount", "pos")

    def __init__(self, element, aromatic, bracket, hcount, pos):
        self.element = element
        self.aromatic = aromatic
        self.bracket = bracket
        self.hcount = hcount
        self.pos = pos


def _bond_between(a: _Atom, b: _Atom, symbol: BondOrder | None) -> BondOrder:
    if symbol is not None:
        return symbol
    if a.aromatic and b.aromatic:
        return BondOrder.AROMATIC
    return BondOrder.SINGLE


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a (polymer-)SMILES string into a :class:`MolecularGraph` with explicit hydrogens."""
    if not isinstance(text, str) or not text.strip():
        raise SmilesError("empty SMILES", 0)
    text = text.strip()
    atoms: list[_Atom] = []
    bonds: list[tuple[int, int, BondOrder, int]] = []  # (a, b, order, char position)
    branch_stack: list[int] = []
    rings: dict[int, tuple[int, BondOrder | None, int]] = {}
    prev: int | None = None
    pending: BondOrder | None = None
    pending_pos = 0
    pos = 0

    def add_atom(atom: _Atom):
        nonlocal prev, pending
        idx = len(atoms)
        atoms.append(atom)
        if prev is not None:
            bonds.append((prev, idx, _bond_between(atoms[prev], atom, pending), atom.pos))
        elif pending is not None:
            raise SmilesError("bond symbol without a preceding atom", pending_pos)
        pending = None
        prev = idx

    while pos < len(text):
        ch = text[pos]
        if ch == "[":
            m = _BRACKET.match(text, pos)
            if m is None:
                raise SmilesError("malformed bracket atom", pos)
            sym = m.group("symbol")
            if sym == "*":
                add_atom(_Atom("*", False, True, 0, pos))
            else:
                aromatic = sym in AROMATIC_SYMBOLS
                element = AROMATIC_SYMBOLS.get(sym, sym)
                if element not in ELEMENT_INDEX:
                    raise SmilesError(f"unsupported element {sym!r}", pos + 1 + len(m.group("isotope")))
                h = m.group("hcount")
                hcount = 0 if h is None else (int(h) if h else 1)
                add_atom(_Atom(element, aromatic, True, hcount, pos))
            pos = m.end()
            continue
        if ch in AROMATIC_SYMBOLS:
            add_atom(_Atom(AROMATIC_SYMBOLS[ch], True, False, None, pos))
            pos += 1
            continue
        if ch.isalpha():
            for sym in ORGANIC_SUBSET:
                if text.startswith(sym, pos):
                    add_atom(_Atom(sym, False, False, None, pos))
                    pos += len(sym)
                    break
            else:
                # Longest plausible element symbol for a helpful message.
                sym = text[pos:pos + 2] if pos + 1 < len(text) and text[pos + 1].islower() else ch
                raise SmilesError(f"unsupported element {sym!r}", pos)
            continue
        if ch in BOND_SYMBOLS:
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", pos)
            pending, pending_pos = BOND_SYMBOLS[ch], pos
            pos += 1
            continue
        if ch in "/\\":
            pos += 1  # directional single bond, stereo ignored
            continue
        if ch == "(":
            if prev is None:
                raise SmilesError("branch opened before any atom", pos)
            if pending is not None:
                raise SmilesError("bond symbol before branch", pos)
            branch_stack.append(prev)
            pos += 1
            continue
        if ch == ")":
            if not branch_stack:
                raise SmilesError("unbalanced ')'", pos)
            if pending is not None:
                raise SmilesError("dangling bond symbol at branch end", pending_pos)
            prev = branch_stack.pop()
            pos += 1
            continue
        if ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesError("ring closure before any atom", pos)
            if ch == "%":
                if pos + 2 >= len(text) or not text[pos + 1:pos + 3].isdigit():
                    raise SmilesError("'%' must be followed by two digits", pos)
                num, width = int(text[pos + 1:pos + 3]), 3
            else:
                num, width = int(ch), 1
            if num in rings:
                other, sym, opened = rings.pop(num)
                if other == prev:
                    raise SmilesError("ring closure to the same atom", pos)
                if sym is not None and pending is not None and sym != pending:
                    raise SmilesError("conflicting ring-closure bond symbols", pos)
                order = _bond_between(atoms[other], atoms[prev], pending if pending is not None else sym)
                bonds.append((other, prev, order, pos))
            else:
                rings[num] = (prev, pending, pos)
            pending = None
            pos += width
            continue
        if ch == ".":
            raise SmilesError("multi-component SMILES are not supported", pos)
        raise SmilesError(f"unexpected character {ch!r}", pos)

    if pending is not None:
        raise SmilesError("dangling bond symbol", pending_pos)
    if branch_stack:
        raise SmilesError("unclosed branch", len(text))
    if rings:
        raise SmilesError(f"unclosed ring bond {min(rings)}", min(p for _, _, p in rings.values()))
    if not atoms:
        raise SmilesError("no atoms", 0)
    return _build_graph(atoms, bonds, text)


def _build_graph(atoms: list[_Atom], bonds, text: str) -> MolecularGraph:
    wild = [k for k, a in enumerate(atoms) if a.element == "*"]
    if len(wild) not in (0, 2):
        raise SmilesError(f"expected 0 or 2 wildcard atoms, found {len(wild)}", atoms[wild[0]].pos if wild else 0)
    for w in wild:
        deg = sum(1 for a, b, _, _ in bonds if w in (a, b))
        if deg != 1:
            raise SmilesError("wildcard must have exactly one neighbour", atoms[w].pos)

    keep = [k for k, a in enumerate(atoms) if a.element != "*"]
    remap = {old: new for new, old in enumerate(keep)}
    edges: list[BondEdge] = []
    for a, b, order, _ in bonds:
        if a in remap and b in remap:
            edges.append(BondEdge(remap[a], remap[b], order, 0))
    periodic = bool(wild)
    if periodic:
        ends = []
        for w in wild:
            a, b, _, _ = next(t for t in bonds if w in (t[0], t[1]))
            other = b if a == w else a
            if other not in remap:
                raise SmilesError("wildcards bonded to each other", atoms[w].pos)
            ends.append(remap[other])
        head, tail = ends
        # tail of this unit bonds to the head of the next image along +z
        edges.append(BondEdge(tail, head, BondOrder.SINGLE, 1))

    heavy = [atoms[k] for k in keep]
    valence = [0.0] * len(heavy)
    n_arom = [0] * len(heavy)
    for e in edges:
        for k in (e.i, e.j):
            valence[k] += e.order.valence
            n_arom[k] += e.order is BondOrder.AROMATIC
    elements: list[str] = [a.element for a in heavy]
    hydrogens: list[int] = []
    for k, atom in enumerate(heavy):
        if atom.bracket:
            nh = atom.hcount or 0
        else:
            nh = _implicit_h(atom, valence[k], n_arom[k])
        total = valence[k] + nh
        limit = MAX_VALENCE[atom.element] + (1 if atom.aromatic else 0)
        if total > limit + 1e-9:
            raise SmilesError(f"valence violation on {atom.element} ({total:g} > {limit})", atom.pos)
        hydrogens.append(nh)

    for k, nh in enumerate(hydrogens):
        for _ in range(nh):
            edges.append(BondEdge(k, len(elements), BondOrder.SINGLE, 0))
            elements.append("H")

    graph = MolecularGraph(
        tuple(AtomNode(k, el) for k, el in enumerate(elements)), tuple(edges), periodic
    )
    try:
        _validate_parsed(graph)
    except GraphError as exc:
        raise SmilesError(str(exc), 0) from exc
    return graph


def _implicit_h(atom: _Atom, valence: float, n_aromatic: int) -> int:
    if atom.aromatic:
        # an aromatic atom has one pi electron's worth of bonding beyond its sigma bonds
        target = STANDARD_VALENCES[atom.element][0]
        return max(0, int(math.floor(target - valence + 1e-9)))
    for target in STANDARD_VALENCES[atom.element]:
        if valence <= target + 1e-9:
            return int(round(target - valence))
    return 0


def _validate_parsed(graph: MolecularGraph) -> None:
    # aromatic valence already checked with its allowance; keep the structural checks
    seen = set()
    for b in graph.bonds:
        if b.i == b.j and b.z_shift == 0:
            raise GraphError("self bond without image shift")
        if b.key() in seen:
            raise GraphError(f"duplicate bond between atoms {b.i} and {b.j}")
        seen.add(b.key())
    if graph.periodic and not graph.is_connected():
        raise GraphError("periodic repeat unit is not connected")
