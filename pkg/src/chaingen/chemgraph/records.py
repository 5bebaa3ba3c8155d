"""JSON-lines structure records: one system per line.

Fields: ``id``, ``periodic``, ``elements``, ``bonds`` (``[i, j, order, z_shift]``),
``frac_coords``, ``cart_coords`` (Angstrom) and ``b_z`` (Angstrom).  Molecules
store ``null`` for ``frac_coords`` and ``b_z``.
"""

from __future__ import annotations

import json
import warnings

import numpy as np

# module import (not names) so geometry and this package can import each other in either order
from .. import geometry as geo
from .graph import BondOrder, GraphError, MolecularGraph

FRAC_TOL = 1e-6
_REQUIRED = ("id", "periodic", "elements", "bonds", "cart_coords")
_ORDER_OUT = {BondOrder.SINGLE: 1, BondOrder.DOUBLE: 2, BondOrder.TRIPLE: 3, BondOrder.AROMATIC: 1.5}


class RecordError(ValueError):
    """Schema or consistency violation in a structure record."""


def parse_record(obj: dict | str) -> tuple[MolecularGraph, geo.Structure]:
    if isinstance(obj, str):
        obj = json.loads(obj)
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise RecordError(f"record missing fields {missing}")
    periodic = bool(obj["periodic"])
    elements = list(obj["elements"])
    try:
        graph = MolecularGraph.from_lists(elements, obj["bonds"], periodic).validate()
    except (GraphError, ValueError, TypeError, IndexError) as exc:
        raise RecordError(f"record {obj.get('id')!r}: invalid graph: {exc}") from exc
    cart = np.asarray(obj["cart_coords"], dtype=np.float64)
    if cart.shape != (len(elements), 3):
        raise RecordError(f"record {obj['id']!r}: cart_coords shape {cart.shape} != ({len(elements)}, 3)")
    rid = str(obj["id"])
    if not periodic:
        return graph, geo.Structure(graph, cart, None, None, rid)

    if obj.get("b_z") is None or obj.get("frac_coords") is None:
        raise RecordError(f"periodic record {rid!r} needs b_z and frac_coords")
    try:
        cell = geo.Cell(float(obj["b_z"]))
    except ValueError as exc:
        raise RecordError(f"record {rid!r}: {exc}") from exc
    frac = np.asarray(obj["frac_coords"], dtype=np.float64)
    if frac.shape != cart.shape:
        raise RecordError(f"record {rid!r}: frac_coords shape {frac.shape} != cart_coords shape {cart.shape}")
    delta = geo.cart_to_frac(cart, cell) - frac
    delta[:, 2] -= np.round(delta[:, 2])
    if np.max(np.abs(delta)) > FRAC_TOL:
        raise RecordError(f"record {rid!r}: fractional/Cartesian mismatch {np.max(np.abs(delta)):.3g}")
    if np.any((frac[:, 2] < 0) | (frac[:, 2] >= 1)):
        warnings.warn(f"record {rid!r}: fractional z outside [0, 1) wrapped", stacklevel=2)
    frac = geo.wrap_frac(frac)
    return graph, geo.Structure(graph, geo.frac_to_cart(frac, cell), frac, cell, rid)


def parse_graph_file(content: bytes | str) -> list[tuple[MolecularGraph, geo.Structure]]:
    """Parse every non-blank line of a JSON-lines structure file."""
    if isinstance(content, bytes):
        content = content.decode("utf-8")
    out = []
    for lineno, line in enumerate(content.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordError(f"line {lineno}: not JSON: {exc}") from exc
        out.append(parse_record(obj))
    return out


def record_dict(s: geo.Structure) -> dict:
    g = s.graph
    return {
        "id": s.id,
        "periodic": s.periodic,
        "elements": g.elements,
        "bonds": [[b.i, b.j, _ORDER_OUT[b.order], b.z_shift] for b in g.bonds],
        "frac_coords": s.frac.tolist() if s.periodic else None,
        "cart_coords": s.cart.tolist(),
        "b_z": s.cell.c if s.periodic else None,
    }


def dump_record(s: geo.Structure) -> str:
    return json.dumps(record_dict(s), separators=(",", ":"))


def load_records(path) -> list[geo.Structure]:
    with open(path, "rb") as fh:
        return [s for _, s in parse_graph_file(fh.read())]


def write_records(path, structures) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in structures:
            fh.write(dump_record(s) + "\n")
