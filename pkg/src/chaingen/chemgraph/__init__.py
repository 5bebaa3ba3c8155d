"""Molecular graphs, polymer-SMILES parsing, positional encodings and isomorphism."""

from .graph import (
    ELEMENT_INDEX,
    SUPPORTED_ELEMENTS,
    AtomNode,
    BondEdge,
    BondOrder,
    GraphError,
    MolecularGraph,
    disjoint_union,
)
from .smiles import SmilesError, parse_smiles
from .encodings import (
    PositionalEncodings,
    distance_class_tensor,
    laplacian_pe,
    positional_encodings,
    random_walk_pe,
)
from .isomorphism import MatchResult, MatchStatus, is_isomorphic, match_graphs
from .records import RecordError, dump_record, load_records, parse_graph_file, parse_record, write_records

__all__ = [
    "ELEMENT_INDEX", "SUPPORTED_ELEMENTS", "AtomNode", "BondEdge", "BondOrder", "GraphError",
    "MolecularGraph", "disjoint_union", "SmilesError", "parse_smiles", "PositionalEncodings",
    "distance_class_tensor", "laplacian_pe", "positional_encodings", "random_walk_pe",
    "MatchResult", "MatchStatus", "is_isomorphic", "match_graphs", "RecordError", "dump_record",
    "load_records", "parse_graph_file", "parse_record", "write_records",
]
