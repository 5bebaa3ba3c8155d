"""Element-labelled graph isomorphism on quotient-graph adjacency.

Bond orders and image shifts are ignored: two graphs match when some
bijection of atoms preserves element labels and the number of bonds between
every atom pair.  A pair bonded both inside the cell and across the boundary
therefore differs from one bonded only once.  Candidates are pruned by colour
refinement before a backtracking search.
"""

from __future__ import annotations

import enum
import sys
from collections import Counter
from dataclasses import dataclass

from .graph import MolecularGraph

DEFAULT_BUDGET = 200_000


class MatchStatus(enum.Enum):
    ISOMORPHIC = "isomorphic"
    NOT_ISOMORPHIC = "not_isomorphic"
    BUDGET_EXCEEDED = "budget_exceeded"


@dataclass(frozen=True)
class MatchResult:
    status: MatchStatus
    mapping: dict[int, int] | None = None
    expansions: int = 0

    def __bool__(self) -> bool:
        return self.status is MatchStatus.ISOMORPHIC


def _bond_keys(g: MolecularGraph) -> set:
    """Distinct bonds as (i <= j, shift) with the shift sign fixed by the ordering."""
    keys = set()
    for b in g.bonds:
        i, j, s = (b.i, b.j, b.z_shift) if b.i < b.j else (b.j, b.i, -b.z_shift)
        keys.add((i, j, abs(s) if i == j else s))
    return keys


def _multi_adjacency(g: MolecularGraph):
    """Neighbour multiplicities per atom and self-image bond counts."""
    nbrs = [Counter() for _ in range(g.n_atoms)]
    loops = [0] * g.n_atoms
    for i, j, _ in _bond_keys(g):
        if i == j:
            loops[i] += 1
        else:
            nbrs[i][j] += 1
            nbrs[j][i] += 1
    return nbrs, loops


def _refine(graphs_adj, labels):
    """Joint 1-WL colour refinement so colours are comparable across graphs."""
    colors = [list(lab) for lab in labels]
    n_classes = len(set(c for cs in colors for c in cs))
    while True:
        sigs = []
        for (nbrs, loops), cs in zip(graphs_adj, colors):
            sigs.append([
                (cs[u], loops[u], tuple(sorted((cs[v], m) for v, m in nbrs[u].items()))) for u in range(len(cs))
            ])
        palette = {s: k for k, s in enumerate(sorted(set(s for ss in sigs for s in ss), key=repr))}
        colors = [[palette[s] for s in ss] for ss in sigs]
        if len(palette) == n_classes:
            return colors
        n_classes = len(palette)


def match_graphs(g: MolecularGraph, h: MolecularGraph, budget: int = DEFAULT_BUDGET) -> MatchResult:
    """Search for an element-preserving adjacency bijection from g onto h."""
    n = g.n_atoms
    if n != h.n_atoms or Counter(g.elements) != Counter(h.elements):
        return MatchResult(MatchStatus.NOT_ISOMORPHIC)
    if len(_bond_keys(g)) != len(_bond_keys(h)):
        return MatchResult(MatchStatus.NOT_ISOMORPHIC)
    if n == 0:
        return MatchResult(MatchStatus.ISOMORPHIC, {})

    adj_g, adj_h = _multi_adjacency(g), _multi_adjacency(h)
    cg, ch = _refine([adj_g, adj_h], [g.elements, h.elements])
    if Counter(cg) != Counter(ch):
        return MatchResult(MatchStatus.NOT_ISOMORPHIC)

    nbrs_g, loops_g = adj_g
    nbrs_h, loops_h = adj_h
    by_color: dict[int, list[int]] = {}
    for v, c in enumerate(ch):
        by_color.setdefault(c, []).append(v)
    class_size = Counter(cg)

    # Visit order: rarest colour first, then grow along already-ordered neighbours.
    order: list[int] = []
    placed = set()
    while len(order) < n:
        frontier = [u for u in range(n) if u not in placed and nbrs_g[u].keys() & placed]
        pool = frontier or [u for u in range(n) if u not in placed]
        u = min(pool, key=lambda x: (class_size[cg[x]], -len(nbrs_g[x].keys() & placed), x))
        order.append(u)
        placed.add(u)

    mapping: dict[int, int] = {}
    used: set[int] = set()
    expansions = 0

    def feasible(u: int, v: int) -> bool:
        if loops_g[u] != loops_h[v]:
            return False
        for w, m in nbrs_g[u].items():
            if w in mapping and nbrs_h[v].get(mapping[w], 0) != m:
                return False
        mapped_nbrs = sum(1 for w in nbrs_g[u] if w in mapping)
        return mapped_nbrs == sum(1 for x in nbrs_h[v] if x in used)

    def search(depth: int):
        nonlocal expansions
        if depth == n:
            return True
        u = order[depth]
        for v in by_color[cg[u]]:
            if v in used:
                continue
            expansions += 1
            if expansions > budget:
                raise _BudgetExceeded
            if feasible(u, v):
                mapping[u] = v
                used.add(v)
                if search(depth + 1):
                    return True
                del mapping[u]
                used.discard(v)
        return False

    try:
        found = _run_deep(search)
    except _BudgetExceeded:
        return MatchResult(MatchStatus.BUDGET_EXCEEDED, None, expansions)
    if found:
        return MatchResult(MatchStatus.ISOMORPHIC, dict(mapping), expansions)
    return MatchResult(MatchStatus.NOT_ISOMORPHIC, None, expansions)


class _BudgetExceeded(Exception):
    pass


def _run_deep(search):
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, 10_000))
    try:
        return search(0)
    finally:
        sys.setrecursionlimit(limit)


def is_isomorphic(g: MolecularGraph, h: MolecularGraph, budget: int = DEFAULT_BUDGET) -> bool:
    """True iff g and h are isomorphic as element-labelled multigraphs; budget overruns count as False."""
    return match_graphs(g, h, budget).status is MatchStatus.ISOMORPHIC
