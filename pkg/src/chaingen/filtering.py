"""Post-generation validity filter: short contacts, then connectivity against the input graph."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .chemgraph.graph import MolecularGraph
from .chemgraph.isomorphism import DEFAULT_BUDGET, MatchStatus, match_graphs
from .geometry import BOND_FACTOR, SHORT_BOND, Structure, perceive_bonds


class GenStatus(enum.Enum):
    SUCCESS = "success"
    CONNECTIVITY_MISMATCH = "connectivity_mismatch"
    SHORT_BOND = "short_bond"
    NONFINITE = "nonfinite"


@dataclass(frozen=True)
class GenReport:
    status: GenStatus
    shortest_bond: float
    perceived_graph: MolecularGraph | None
    details: str = ""

    @property
    def success(self) -> bool:
        return self.status is GenStatus.SUCCESS

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "shortest_bond": None if not np.isfinite(self.shortest_bond) else round(float(self.shortest_bond), 10),
            "details": self.details,
        }


def filter_structure(generated: Structure, reference: MolecularGraph, *, factor: float = BOND_FACTOR,
                     min_bond: float = SHORT_BOND, budget: int = DEFAULT_BUDGET) -> GenReport:
    """Classify a generated structure against the graph it was conditioned on.

    ``shortest_bond`` is the closest contact between any two atoms (through
    the z images for periodic structures), so an overlapping pair is
    rejected even when bond perception would not call it a bond.
    """
    cart = np.asarray(generated.cart)
    if not np.all(np.isfinite(cart)) or (generated.periodic and not np.isfinite(generated.cell.c)):
        return GenReport(GenStatus.NONFINITE, float("nan"), None, "non-finite coordinates")
    perceived = perceive_bonds(generated.elements, cart, generated.cell, factor)
    shortest = perceived.shortest_contact
    if shortest < min_bond:
        return GenReport(GenStatus.SHORT_BOND, shortest, perceived.graph, f"contact {shortest:.3f} A < {min_bond} A")
    result = match_graphs(reference, perceived.graph, budget)
    if result.status is MatchStatus.ISOMORPHIC:
        return GenReport(GenStatus.SUCCESS, shortest, perceived.graph)
    if result.status is MatchStatus.BUDGET_EXCEEDED:
        detail = "isomorphism search budget exceeded"
    else:
        detail = f"{len(reference.bonds)} reference vs {len(perceived.graph.bonds)} perceived bonds"
        if reference.n_atoms != generated.n_atoms:
            detail = f"{reference.n_atoms} reference atoms vs {generated.n_atoms} generated"
    return GenReport(GenStatus.CONNECTIVITY_MISMATCH, shortest, perceived.graph, detail)
