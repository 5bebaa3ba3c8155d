"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import dataclasses
import numbers

from .chemgraph.graph import MolecularGraph
from .chemgraph.records import parse_record
from .chemgraph.smiles import parse_smiles
from .geometry import Structure


def check_structures(X, *, allow_empty: bool = False) -> list[Structure]:
    """Coerce structures, ``(graph, structure)`` pairs or record dicts into a list of structures."""
    if isinstance(X, (Structure, dict, str)):
        X = [X]
    out = []
    for k, item in enumerate(X):
        if isinstance(item, Structure):
            out.append(item)
        elif isinstance(item, tuple) and len(item) == 2 and isinstance(item[1], Structure):
            out.append(item[1])
        elif isinstance(item, (dict, str)):
            out.append(parse_record(item)[1])
        else:
            raise TypeError(f"item {k}: expected a Structure or record, got {type(item).__name__}")
    if not out and not allow_empty:
        raise ValueError("no structures given")
    return out


def check_graphs(X) -> list[MolecularGraph]:
    """Coerce SMILES strings, graphs or structures into a list of graphs."""
    if isinstance(X, (str, MolecularGraph, Structure)):
        X = [X]
    out = []
    for k, item in enumerate(X):
        if isinstance(item, MolecularGraph):
            out.append(item)
        elif isinstance(item, Structure):
            out.append(item.graph)
        elif isinstance(item, str):
            out.append(parse_smiles(item))
        else:
            raise TypeError(f"item {k}: expected SMILES, graph or structure, got {type(item).__name__}")
    if not out:
        raise ValueError("no graphs given")
    return out


def check_seed(random_state) -> int:
    """Integer seed from ``None`` (0) or an integer."""
    if random_state is None:
        return 0
    if isinstance(random_state, numbers.Integral) and random_state >= 0:
        return int(random_state)
    raise ValueError(f"random_state must be a nonnegative integer or None, got {random_state!r}")


def check_config(value, cls):
    """Accept an instance of the dataclass ``cls``, a dict of its fields, or None for defaults."""
    if value is None:
        return cls()
    if isinstance(value, cls):
        return dataclasses.replace(value)
    if isinstance(value, dict):
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(value) - known
        if bad:
            raise ValueError(f"unknown {cls.__name__} keys: {sorted(bad)}")
        return cls(**value)
    raise TypeError(f"expected {cls.__name__}, dict or None; got {type(value).__name__}")
