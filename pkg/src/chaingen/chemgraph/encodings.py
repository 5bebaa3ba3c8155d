"""Graph positional encodings and the graph-distance class tensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import GraphError, MolecularGraph

RW_STEPS = 16
LAP_DIM = 2
N_DISTANCE_CLASSES = 5


@dataclass(frozen=True)
class PositionalEncodings:
    rw: np.ndarray   # (N, 16)
    lap: np.ndarray  # (N, 2)


def random_walk_pe(g: MolecularGraph, k: int = RW_STEPS) -> np.ndarray:
    """Return-probabilities of the t-step random walk ``(D^-1 A)^t`` for t = 1..k, one row per atom."""
    a = g.adjacency()
    deg = a.sum(axis=1)
    if g.n_atoms and np.any(deg == 0):
        raise GraphError(f"isolated atom(s) {np.flatnonzero(deg == 0).tolist()} have no random walk")
    walk = a / deg[:, None] if g.n_atoms else a
    out = np.zeros((g.n_atoms, k))
    power = np.eye(g.n_atoms)
    for t in range(k):
        power = power @ walk
        out[:, t] = np.diag(power)
    return out


def laplacian_pe(g: MolecularGraph, k: int = LAP_DIM, tol: float = 1e-9) -> np.ndarray:
    """Eigenvectors of the symmetric normalized Laplacian for the k smallest nonzero eigenvalues.

    Each column is sign-fixed so that its largest-magnitude entry is positive,
    ties going to the lowest atom index.  Columns that do not exist (graphs
    with fewer than k+1 atoms) are zero.
    """
    n = g.n_atoms
    out = np.zeros((n, k))
    if n == 0:
        return out
    a = g.adjacency()
    deg = a.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    lap = np.eye(n) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    evals, evecs = np.linalg.eigh(lap)
    cols = [c for c in range(n) if evals[c] > tol][:k]
    for slot, c in enumerate(cols):
        v = evecs[:, c] / np.linalg.norm(evecs[:, c])
        mags = np.abs(v)
        lead = int(np.flatnonzero(mags >= mags.max() - 1e-12)[0])
        out[:, slot] = v if v[lead] > 0 else -v
    return out


def positional_encodings(g: MolecularGraph) -> PositionalEncodings:
    return PositionalEncodings(random_walk_pe(g, RW_STEPS), laplacian_pe(g, LAP_DIM))


def distance_class_tensor(g: MolecularGraph) -> np.ndarray:
    """One-hot (N, N, 5): identical, bonded, 1-3 (angle), 1-4 (dihedral), farther or disconnected."""
    spd = g.shortest_paths()
    cls = np.where((spd < 0) | (spd >= 4), 4, spd)
    return np.eye(N_DISTANCE_CLASSES)[cls]
