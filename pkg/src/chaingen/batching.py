"""Padded batches of graphs and structures for the neural modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .chemgraph.encodings import distance_class_tensor, positional_encodings
from .chemgraph.graph import ELEMENT_INDEX, BondOrder, MolecularGraph
from .diffengine import DTYPE
from .geometry import BOX_XY, Structure, enumerate_internal_coords

# Bond-type vocabulary seen by the conditioner; periodic closures get their own token.
BOND_TOKENS = {BondOrder.SINGLE: 0, BondOrder.DOUBLE: 1, BondOrder.TRIPLE: 2, BondOrder.AROMATIC: 3}
PERIODIC_TOKEN = 4
N_BOND_TOKENS = 5
N_ATOM_TOKENS = len(ELEMENT_INDEX)
MOLECULE_SCALE = 10.0  # Angstrom; Cartesian scale for non-periodic systems


@dataclass(frozen=True)
class GraphFeatures:
    atom_types: np.ndarray  # (N,)
    rw: np.ndarray          # (N, 16)
    lap: np.ndarray         # (N, 2)
    edges: np.ndarray       # (E, 2) directed receiver, sender
    edge_types: np.ndarray  # (E,)
    dist: np.ndarray        # (N, N, 5)


def graph_features(g: MolecularGraph) -> GraphFeatures:
    if "features" in g._cache:
        return g._cache["features"]
    pe = positional_encodings(g)
    edges, types = [], []
    for b in g.bonds:
        tok = PERIODIC_TOKEN if b.z_shift != 0 else BOND_TOKENS[b.order]
        edges += [(b.i, b.j), (b.j, b.i)]
        types += [tok, tok]
    feats = GraphFeatures(
        np.array([ELEMENT_INDEX[e] for e in g.elements], dtype=np.int64),
        pe.rw,
        pe.lap,
        np.array(edges, dtype=np.int64).reshape(-1, 2),
        np.array(types, dtype=np.int64),
        distance_class_tensor(g),
    )
    g._cache["features"] = feats
    return feats


@dataclass
class GraphBatch:
    """B systems padded to N atoms; flat atom ids index the (B*N) layout."""

    n_sys: int
    n_max: int
    mask: torch.Tensor          # (B, N) bool
    atom_types: torch.Tensor    # (B, N)
    rw: torch.Tensor            # (B, N, 16)
    lap: torch.Tensor           # (B, N, 2)
    edge_recv: torch.Tensor     # (E,) flat
    edge_send: torch.Tensor     # (E,) flat
    edge_types: torch.Tensor    # (E,)
    dist: torch.Tensor          # (B, N, N, 5)
    periodic: torch.Tensor      # (B,) bool
    dataset: torch.Tensor       # (B,) long
    n_atoms: torch.Tensor       # (B,)
    graphs: list

    @property
    def flat_mask(self) -> torch.Tensor:
        return self.mask.reshape(-1)


@dataclass
class StructureBatch:
    graph: GraphBatch
    frac: torch.Tensor      # (B, N, 3) zeros for molecules
    pos: torch.Tensor       # (B, N, 3) scaled Cartesian
    cart: torch.Tensor      # (B, N, 3) Angstrom
    b_z: torch.Tensor       # (B,) zeros for molecules
    bonds: torch.Tensor     # (nb, 2) flat ids
    bond_sys: torch.Tensor  # (nb,)
    angles: torch.Tensor    # (na, 3)
    angle_sys: torch.Tensor
    dihedrals: torch.Tensor  # (nd, 4)
    dihedral_sys: torch.Tensor


def collate_graphs(graphs, dataset_ids=None) -> GraphBatch:
    graphs = list(graphs)
    b = len(graphs)
    n = max(g.n_atoms for g in graphs)
    mask = np.zeros((b, n), dtype=bool)
    types = np.zeros((b, n), dtype=np.int64)
    rw = np.zeros((b, n, 16))
    lap = np.zeros((b, n, 2))
    dist = np.zeros((b, n, n, 5))
    dist[..., 4] = 1.0
    recv, send, etypes = [], [], []
    for k, g in enumerate(graphs):
        f = graph_features(g)
        m = g.n_atoms
        mask[k, :m] = True
        types[k, :m] = f.atom_types
        rw[k, :m] = f.rw
        lap[k, :m] = f.lap
        dist[k, :m, :m] = f.dist
        if len(f.edges):
            recv.append(f.edges[:, 0] + k * n)
            send.append(f.edges[:, 1] + k * n)
            etypes.append(f.edge_types)
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=np.int64))
    if dataset_ids is None:
        dataset_ids = [0] * b
    return GraphBatch(
        b, n,
        torch.as_tensor(mask),
        torch.as_tensor(types),
        torch.as_tensor(rw, dtype=DTYPE),
        torch.as_tensor(lap, dtype=DTYPE),
        torch.as_tensor(cat(recv)),
        torch.as_tensor(cat(send)),
        torch.as_tensor(cat(etypes)),
        torch.as_tensor(dist, dtype=DTYPE),
        torch.as_tensor([g.periodic for g in graphs]),
        torch.as_tensor(np.asarray(dataset_ids, dtype=np.int64)),
        torch.as_tensor([g.n_atoms for g in graphs]),
        graphs,
    )


def scaled_positions(s: Structure) -> np.ndarray:
    """Cartesian positions divided by the cell edges (periodic) or by a fixed 10 Angstrom."""
    if s.periodic:
        return s.cart / np.array([BOX_XY, BOX_XY, s.cell.c])
    return s.cart / MOLECULE_SCALE


def collate_structures(structures, dataset_ids=None) -> StructureBatch:
    structures = list(structures)
    gb = collate_graphs([s.graph for s in structures], dataset_ids)
    b, n = gb.n_sys, gb.n_max
    frac = np.zeros((b, n, 3))
    pos = np.zeros((b, n, 3))
    cart = np.zeros((b, n, 3))
    bz = np.zeros(b)
    ic = {"bonds": ([], []), "angles": ([], []), "dihedrals": ([], [])}
    for k, s in enumerate(structures):
        m = s.n_atoms
        cart[k, :m] = s.cart
        pos[k, :m] = scaled_positions(s)
        if s.periodic:
            frac[k, :m] = s.frac
            bz[k] = s.cell.c
        idx = enumerate_internal_coords(s.graph)
        for name, arr in (("bonds", idx.bonds[:, :2]), ("angles", idx.angles), ("dihedrals", idx.dihedrals)):
            ic[name][0].append(arr + k * n)
            ic[name][1].append(np.full(len(arr), k, dtype=np.int64))
    width = {"bonds": 2, "angles": 3, "dihedrals": 4}
    packed = {}
    for name, (ids, sys) in ic.items():
        packed[name] = torch.as_tensor(np.concatenate(ids).reshape(-1, width[name]))
        packed[name + "_sys"] = torch.as_tensor(np.concatenate(sys))
    return StructureBatch(
        gb,
        torch.as_tensor(frac, dtype=DTYPE),
        torch.as_tensor(pos, dtype=DTYPE),
        torch.as_tensor(cart, dtype=DTYPE),
        torch.as_tensor(bz, dtype=DTYPE),
        packed["bonds"], packed["bonds_sys"],
        packed["angles"], packed["angles_sys"],
        packed["dihedrals"], packed["dihedrals_sys"],
    )
