"""Graph interaction network producing per-atom conditioning vectors.

Node states start from an atom-type embedding concatenated with the random-walk
(16) and Laplacian (2) encodings.  Each of the four layers updates every
directed edge state from its endpoints, sums incoming edges into a message,
and updates the node state; both updates keep a linear residual path.  After
the last layer the node states are summed per graph and every atom's
conditioning vector is an MLP of ``[graph sum; own state]``.
"""

from __future__ import annotations

import torch
from torch import nn

from .batching import N_ATOM_TOKENS, N_BOND_TOKENS, GraphBatch, collate_graphs
from .chemgraph.encodings import LAP_DIM, RW_STEPS, PositionalEncodings
from .chemgraph.graph import MolecularGraph
from .diffengine import segment_sum
from .layers import MLP, to_dtype


class InteractionLayer(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.w_e = nn.Linear(hidden, hidden, bias=False)
        self.w_v = nn.Linear(hidden, hidden, bias=False)
        self.norm_e = nn.LayerNorm(3 * hidden)
        self.norm_v = nn.LayerNorm(2 * hidden)
        self.f_e = MLP(3 * hidden, hidden, hidden)
        self.f_v = MLP(2 * hidden, hidden, hidden)

    def forward(self, h, e, recv, send):
        e = self.w_e(e) + self.f_e(self.norm_e(torch.cat([e, h[recv], h[send]], dim=-1)))
        m = segment_sum(e, recv, h.shape[0])
        h = self.w_v(h) + self.f_v(self.norm_v(torch.cat([m, h], dim=-1)))
        return h, e


class GraphConditioner(nn.Module):
    def __init__(self, hidden: int = 256, d_cond: int = 256, n_layers: int = 4):
        super().__init__()
        self.hidden = hidden
        self.d_cond = d_cond
        self.atom_embed = nn.Embedding(N_ATOM_TOKENS, hidden)
        self.bond_embed = nn.Embedding(N_BOND_TOKENS, hidden)
        self.input_mlp = MLP(hidden + RW_STEPS + LAP_DIM, hidden, hidden)
        self.layers = nn.ModuleList(InteractionLayer(hidden) for _ in range(n_layers))
        self.f_final = MLP(2 * hidden, hidden, d_cond)
        to_dtype(self)

    def forward(self, batch: GraphBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(C, h)`` with shapes (B, N, d_cond) and (B, N, hidden); padded rows are zero."""
        b, n = batch.n_sys, batch.n_max
        mask = batch.flat_mask.unsqueeze(-1).to(batch.rw.dtype)
        h = torch.cat(
            [self.atom_embed(batch.atom_types.reshape(-1)),
             batch.rw.reshape(b * n, -1), batch.lap.reshape(b * n, -1)], dim=-1
        )
        h = self.input_mlp(h)
        e = self.bond_embed(batch.edge_types)
        for layer in self.layers:
            h, e = layer(h, e, batch.edge_recv, batch.edge_send)
        h = h * mask
        hg = h.reshape(b, n, -1)
        g = hg.sum(dim=1, keepdim=True).expand(-1, n, -1)
        c = self.f_final(torch.cat([g, hg], dim=-1)) * batch.mask.unsqueeze(-1)
        return c, hg


def embed_graph(g: MolecularGraph, pe: PositionalEncodings | None, model: GraphConditioner) -> torch.Tensor:
    """Conditioning vectors (N, d_cond) for a single graph.

    ``pe`` overrides the encodings computed from ``g`` (lengths must be 16 and 2).
    """
    batch = collate_graphs([g])
    if pe is not None:
        if pe.rw.shape != (g.n_atoms, RW_STEPS) or pe.lap.shape != (g.n_atoms, LAP_DIM):
            raise ValueError(
                f"positional encodings must be ({g.n_atoms}, {RW_STEPS}) and ({g.n_atoms}, {LAP_DIM}); "
                f"got {pe.rw.shape} and {pe.lap.shape}"
            )
        batch.rw = torch.as_tensor(pe.rw, dtype=batch.rw.dtype)[None]
        batch.lap = torch.as_tensor(pe.lap, dtype=batch.lap.dtype)[None]
    c, _ = model(batch)
    return c[0]
