"""Atom-wise structural autoencoder.

Each atom is encoded to a Gaussian over a small latent vector; the decoder
maps latents back to fractional coordinates, scaled Cartesian coordinates and
a pooled cell-height estimate.  Both halves are plain transformers over atom
tokens whose only notion of identity comes from the graph conditioning.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .batching import MOLECULE_SCALE, StructureBatch, collate_structures
from .conditioner import GraphConditioner
from .config import LossWeights, ModelConfig, TrainConfig
from .datapipe import augment, make_epoch
from .diffengine import DTYPE, Adam, module_arrays, named_parameters
from .geometry import BOX_XY, Structure, wrap_frac
from .layers import MLP, TransformerBlock, to_dtype

log = logging.getLogger(__name__)

BBOX_SCALE = 10.0
# Scaled coordinates vary by ~0.1 within a chain; a fixed gain keeps encoder inputs O(1).
INPUT_GAIN = 10.0
# Decoder heads predict offsets from the cell centre in these units (fractions
# of 55 / 55 / b_z for chains, of 10 Angstrom for molecules), so O(1) head
# outputs resolve hundredths of an Angstrom across the chain cross-section.
PERIODIC_OUT_SCALE = (0.1, 0.1, 0.5)
# Initial posterior log-scale.  Adam moves a bias by about lr per step, so
# starting at sigma = 1 leaves the decoder training on noisy latents for
# thousands of steps; the KL term still pulls sigma up where it is unused.
LOG_SIGMA_INIT = -3.0
LOSS_TERMS = ("bbox", "frac_coords", "pos", "kl", "bond", "angle", "dihedral")


class TrainingDiverged(RuntimeError):
    """Raised after too many consecutive non-finite losses."""


def bbox_target(b_z, n_atoms):
    """Normalised cell height ``b_z / (10 * cbrt(N))``."""
    return b_z / (BBOX_SCALE * n_atoms ** (1.0 / 3.0))


def bbox_unnormalize(b_hat, n_atoms):
    return b_hat * BBOX_SCALE * n_atoms ** (1.0 / 3.0)


class LatentAutoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        w = cfg.vae_width
        self.conditioner = GraphConditioner(cfg.cond_hidden, cfg.cond_dim, cfg.cond_layers)
        self.enc_in = nn.Linear(6, w)
        self.enc_cond = nn.Linear(cfg.cond_dim, w)
        self.enc_flag = nn.Embedding(2, w)
        self.encoder = nn.ModuleList(
            TransformerBlock(w, cfg.vae_heads, cfg.mlp_ratio) for _ in range(cfg.vae_blocks)
        )
        self.enc_norm = nn.LayerNorm(w)
        self.enc_out = nn.Linear(w, 2 * cfg.latent_dim)
        with torch.no_grad():
            self.enc_out.bias[cfg.latent_dim:] = LOG_SIGMA_INIT
        self.dec_in = nn.Linear(cfg.latent_dim, w)
        self.dec_cond = nn.Linear(cfg.cond_dim, w)
        self.dec_flag = nn.Embedding(2, w)
        self.decoder = nn.ModuleList(
            TransformerBlock(w, cfg.vae_heads, cfg.mlp_ratio) for _ in range(cfg.vae_blocks)
        )
        self.dec_norm = nn.LayerNorm(w)
        self.frac_head = MLP(w, w, 3)
        self.pos_head = MLP(w, w, 3)
        self.bbox_head = MLP(w, w, 1)
        self.register_buffer("out_scale", torch.tensor([PERIODIC_OUT_SCALE, (1.0, 1.0, 1.0)]))
        to_dtype(self)

    @property
    def latent_dim(self) -> int:
        return self.cfg.latent_dim

    def condition(self, batch: StructureBatch) -> torch.Tensor:
        c, _ = self.conditioner(batch.graph)
        return c

    def encode(self, batch: StructureBatch, cond: torch.Tensor | None = None):
        """Per-atom ``(mu, log_sigma)``, each (B, N, d); sigma = exp(log_sigma)."""
        cond = self.condition(batch) if cond is None else cond
        g = batch.graph
        if cond.shape[:2] != g.mask.shape:
            raise ValueError(f"conditioning rows {tuple(cond.shape[:2])} do not match atoms {tuple(g.mask.shape)}")
        x = self.enc_in(INPUT_GAIN * torch.cat([batch.frac, batch.pos], dim=-1))
        x = x + self.enc_cond(cond) + self.enc_flag(g.periodic.long())[:, None, :]
        for block in self.encoder:
            x = block(x, g.mask)
        mu, log_sigma = self.enc_out(self.enc_norm(x)).chunk(2, dim=-1)
        m = g.mask.unsqueeze(-1)
        return mu * m, log_sigma * m

    def decode(self, z: torch.Tensor, cond: torch.Tensor, periodic: torch.Tensor, mask: torch.Tensor):
        """Return ``(frac_hat, pos_hat, bbox_hat)`` with shapes (B,N,3), (B,N,3), (B,)."""
        if z.shape[:2] != cond.shape[:2]:
            raise ValueError(f"latent rows {tuple(z.shape[:2])} do not match conditioning {tuple(cond.shape[:2])}")
        x = self.dec_in(z) + self.dec_cond(cond) + self.dec_flag(periodic.long())[:, None, :]
        for block in self.decoder:
            x = block(x, mask)
        x = self.dec_norm(x)
        m = mask.unsqueeze(-1).to(x.dtype)
        per_atom = self.bbox_head(x).squeeze(-1) * m.squeeze(-1)
        bbox = per_atom.sum(dim=1) / m.sum(dim=(1, 2))
        scale = self.out_scale[(~periodic).long()][:, None, :]
        frac = 0.5 + scale * self.frac_head(x)
        pos = 0.5 * periodic[:, None, None] + scale * self.pos_head(x)
        return frac * m, pos * m, bbox

    def forward(self, batch: StructureBatch, generator: torch.Generator | None = None, sample: bool = True):
        cond = self.condition(batch)
        mu, log_sigma = self.encode(batch, cond)
        z = reparameterize(mu, log_sigma.exp(), generator) if sample else mu
        frac, pos, bbox = self.decode(z, cond, batch.graph.periodic, batch.graph.mask)
        return {"mu": mu, "log_sigma": log_sigma, "z": z, "frac": frac, "pos": pos, "bbox": bbox, "cond": cond}


def reparameterize(mu: torch.Tensor, sigma: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """``mu + sigma * eps`` with standard-normal ``eps`` drawn from ``generator``."""
    if (sigma < 0).any():
        raise ValueError("sigma must be nonnegative")
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + sigma * eps


def gaussian_kl(mu: torch.Tensor, log_sigma: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, sigma) || N(0, 1)) summed over the last axis."""
    return 0.5 * (mu ** 2 + torch.exp(2 * log_sigma) - 1.0 - 2 * log_sigma).sum(dim=-1)


# ----------------------------------------------------------------------------
# differentiable internal coordinates


def _safe_norm(x, eps=1e-12):
    return torch.sqrt((x * x).sum(dim=-1) + eps)


def _pair_vectors(batch: StructureBatch, frac, pos, b_z, a, b, sys):
    """Cartesian vectors from flat atom ``a`` to ``b``: min image for chains, plain for molecules."""
    flat_f = frac.reshape(-1, 3)
    flat_p = pos.reshape(-1, 3)
    df = flat_f[b] - flat_f[a]
    dz = df[:, 2] - torch.round(df[:, 2]).detach()
    lengths = torch.stack([torch.full_like(b_z, BOX_XY), torch.full_like(b_z, BOX_XY), b_z], dim=-1)[sys]
    periodic_vec = torch.stack([df[:, 0], df[:, 1], dz], dim=-1) * lengths
    molecule_vec = (flat_p[b] - flat_p[a]) * MOLECULE_SCALE
    per = batch.graph.periodic[sys].unsqueeze(-1)
    return torch.where(per, periodic_vec, molecule_vec)


def torch_internal_coords(batch: StructureBatch, frac, pos, b_z):
    """Bond lengths (Angstrom), angles and dihedrals (radians) for every enumerated coordinate."""
    bi, ai, di = batch.bonds, batch.angles, batch.dihedrals
    bond = _safe_norm(_pair_vectors(batch, frac, pos, b_z, bi[:, 0], bi[:, 1], batch.bond_sys))
    u = _pair_vectors(batch, frac, pos, b_z, ai[:, 1], ai[:, 0], batch.angle_sys)
    v = _pair_vectors(batch, frac, pos, b_z, ai[:, 1], ai[:, 2], batch.angle_sys)
    angle = torch.atan2(_safe_norm(torch.cross(u, v, dim=-1)), (u * v).sum(-1))
    s = batch.dihedral_sys
    b1 = _pair_vectors(batch, frac, pos, b_z, di[:, 0], di[:, 1], s)
    b2 = _pair_vectors(batch, frac, pos, b_z, di[:, 1], di[:, 2], s)
    b3 = _pair_vectors(batch, frac, pos, b_z, di[:, 2], di[:, 3], s)
    n1 = torch.cross(b1, b2, dim=-1)
    n2 = torch.cross(b2, b3, dim=-1)
    x = (n1 * n2).sum(-1)
    y = _safe_norm(b2) * (b1 * n2).sum(-1)
    dihedral = torch.atan2(y, x)
    degenerate = (_safe_norm(n1) < 1e-5) | (_safe_norm(n2) < 1e-5)
    return bond, angle, dihedral, degenerate


def periodic_diff_rad(a, b):
    """Signed difference ``a - b`` wrapped into [-pi, pi)."""
    return torch.remainder(a - b + math.pi, 2 * math.pi) - math.pi


def _masked_mean(x, mask):
    mask = mask.to(x.dtype)
    total = mask.sum()
    if total == 0:
        return x.sum() * 0.0
    return (x * mask).sum() / total


def vae_loss(batch: StructureBatch, out: dict, weights: LossWeights | None = None):
    """Weighted reconstruction + KL loss; returns ``(total, {term: value})``."""
    weights = weights or LossWeights()
    g = batch.graph
    mask = g.mask
    n_atoms = g.n_atoms.to(DTYPE)
    periodic = g.periodic
    atom_per = mask & periodic[:, None]

    bbox_true = bbox_target(batch.b_z, n_atoms)
    l_bbox = _masked_mean((out["bbox"] - bbox_true) ** 2, periodic)
    l_frac = _masked_mean(((out["frac"] - batch.frac) ** 2).mean(-1), atom_per)

    m = mask.unsqueeze(-1).to(DTYPE)
    def centred(p):
        return p - (p * m).sum(1, keepdim=True) / m.sum(1, keepdim=True)
    l_pos = _masked_mean(((centred(out["pos"]) - centred(batch.pos)) ** 2).mean(-1), mask)
    l_kl = _masked_mean(gaussian_kl(out["mu"], out["log_sigma"]), mask)

    bz_hat = bbox_unnormalize(out["bbox"], n_atoms)
    bond_p, angle_p, dih_p, _ = torch_internal_coords(batch, out["frac"], out["pos"], bz_hat)
    with torch.no_grad():
        bond_t, angle_t, dih_t, degenerate = torch_internal_coords(batch, batch.frac, batch.pos, batch.b_z)
    l_bond = ((bond_p - bond_t) ** 2).mean() if len(bond_t) else bond_p.sum() * 0.0
    l_angle = ((angle_p - angle_t) ** 2).mean() if len(angle_t) else angle_p.sum() * 0.0
    l_dih = _masked_mean(periodic_diff_rad(dih_p, dih_t) ** 2, ~degenerate)

    terms = {"bbox": l_bbox, "frac_coords": l_frac, "pos": l_pos, "kl": l_kl,
             "bond": l_bond, "angle": l_angle, "dihedral": l_dih}
    total = sum(getattr(weights, k) * v for k, v in terms.items())
    return total, terms


# ----------------------------------------------------------------------------
# realisation


def realize(graphs, frac, pos, bbox, ids=None) -> list[Structure]:
    """Turn decoder outputs into structures (fractional z wrapped, heights unnormalised)."""
    out = []
    frac = frac.detach().numpy()
    pos = pos.detach().numpy()
    bbox = bbox.detach().numpy()
    for k, g in enumerate(graphs):
        n = g.n_atoms
        sid = ids[k] if ids is not None else ""
        if g.periodic:
            b_z = float(bbox_unnormalize(bbox[k], n))
            f = frac[k, :n].copy()
            if not np.all(np.isfinite(f)) or not np.isfinite(b_z) or b_z <= 0:
                out.append(None)
                continue
            f = wrap_frac(f)
            out.append(Structure.from_frac(g, f, b_z, sid))
        else:
            p = pos[k, :n] * MOLECULE_SCALE
            out.append(Structure(g, p, None, None, sid) if np.all(np.isfinite(p)) else None)
    return out


@torch.no_grad()
def reconstruct(model: LatentAutoencoder, structures) -> list[Structure]:
    """Decode the posterior means of ``structures``."""
    batch = collate_structures(structures)
    o = model(batch, sample=False)
    return realize(batch.graph.graphs, o["frac"], o["pos"], o["bbox"], [s.id for s in structures])


# ----------------------------------------------------------------------------
# training


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant" or total <= cfg.warmup_steps:
        return cfg.lr
    frac = min(1.0, (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps))
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1 + math.cos(math.pi * frac))


@dataclass
class TrainResult:
    best_state: dict
    best_val: float
    best_step: int
    steps: int
    history: list = field(default_factory=list)   # (step, term, value)
    skipped: int = 0
    counters: dict = field(default_factory=dict)

    def write_curves(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "term", "value"])
            for row in self.history:
                w.writerow([row[0], row[1], repr(float(row[2]))])


def epoch_batches(polymers, molecules, cfg: TrainConfig, seed: int, epoch: int):
    """Augmented, dataset-homogeneous batches for one epoch, reproducible from ``(seed, epoch)``."""
    rng = np.random.default_rng([seed, epoch])
    for ds, records in make_epoch(polymers, molecules, cfg.upsample, cfg.batch_size, rng):
        if cfg.augment:
            records = [augment(s, np.random.default_rng([seed, epoch, k, int(rng.integers(2**31))]))
                       for k, s in enumerate(records)]
        yield ds, records


def steps_per_epoch(n_polymers: int, n_molecules: int, cfg: TrainConfig) -> int:
    per_epoch = math.ceil(n_polymers * cfg.upsample / cfg.batch_size)
    return per_epoch + (math.ceil(n_molecules / cfg.batch_size) if n_molecules else 0)


def total_steps(n_polymers: int, n_molecules: int, cfg: TrainConfig) -> int:
    steps = steps_per_epoch(n_polymers, n_molecules, cfg) * cfg.epochs
    return min(steps, cfg.max_steps) if cfg.max_steps else steps


def batch_stream(polymers, molecules, cfg: TrainConfig, seed: int, start_step: int, total: int):
    """Yield ``(step, epoch, dataset_id, records)``; resuming at ``start_step`` keeps epoch numbering."""
    per_epoch = steps_per_epoch(len(polymers), len(molecules), cfg)
    epoch, skip = divmod(start_step, per_epoch)
    step = start_step
    while step < total:
        for k, (ds, records) in enumerate(epoch_batches(polymers, molecules, cfg, seed, epoch)):
            if k < skip:
                continue
            if step >= total:
                return
            yield step, epoch, ds, records
            step += 1
        skip = 0
        epoch += 1


@torch.no_grad()
def evaluate_vae(model: LatentAutoencoder, structures, weights: LossWeights, batch_size: int = 64) -> float:
    """Mean total loss using posterior means (no sampling noise)."""
    if not structures:
        return float("nan")
    total, count = 0.0, 0
    for start in range(0, len(structures), batch_size):
        chunk = structures[start:start + batch_size]
        batch = collate_structures(chunk)
        loss, _ = vae_loss(batch, model(batch, sample=False), weights)
        total += float(loss) * len(chunk)
        count += len(chunk)
    return total / count


def train_vae(model: LatentAutoencoder, polymers, weights: LossWeights | None = None,
              cfg: TrainConfig | None = None, seed: int = 0, molecules=None, val=None,
              start_step: int = 0, optimizer: Adam | None = None) -> TrainResult:
    """Optimise ``model`` on the polymer set (plus an optional molecule set).

    The best validation checkpoint (lowest mean total loss, posterior means)
    is returned; without a validation set the training structures are used.
    """
    weights = weights or LossWeights()
    cfg = cfg or TrainConfig()
    molecules = list(molecules or [])
    val = list(val) if val else list(polymers)
    params = named_parameters([("", model)])
    opt = optimizer or Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    total = total_steps(len(polymers), len(molecules), cfg)
    gen = torch.Generator().manual_seed(seed)
    best = TrainResult(module_arrays(model), float("inf"), -1, 0)
    bad = 0
    step = start_step
    val_every = cfg.val_every or steps_per_epoch(len(polymers), len(molecules), cfg)
    for step, epoch, ds, records in batch_stream(polymers, molecules, cfg, seed, start_step, total):
        batch = collate_structures(records, [ds] * len(records))
        opt.lr = lr_at(step, total, cfg)
        opt.zero_grad()
        loss, terms = vae_loss(batch, model(batch, gen), weights)
        if not torch.isfinite(loss):
            bad += 1
            opt.skipped += 1
            log.warning("step %d: non-finite loss, skipped (%d consecutive)", step, bad)
            if bad >= cfg.max_bad_steps:
                raise TrainingDiverged(f"{bad} consecutive non-finite losses at step {step}")
            continue
        bad = 0
        loss.backward()
        opt.step()
        best.history.append((step, "total", loss.item()))
        for k, v in terms.items():
            best.history.append((step, k, v.item()))
        if (step + 1) % val_every == 0 or step + 1 == total:
            v = evaluate_vae(model, val, weights)
            best.history.append((step + 1, "val_total", v))
            if v < best.best_val:
                best.best_val, best.best_step = v, step + 1
                best.best_state = module_arrays(model)
            log.info("step %d loss %.5f val %.5f", step + 1, loss.item(), v)
    best.steps = max(total, start_step)
    best.skipped = opt.skipped
    best.counters = {"optimizer": opt}
    return best


__all__ = [
    "BBOX_SCALE", "LOSS_TERMS", "LatentAutoencoder", "TrainResult", "TrainingDiverged", "bbox_target",
    "bbox_unnormalize", "evaluate_vae", "gaussian_kl", "lr_at", "periodic_diff_rad", "realize",
    "reconstruct", "reparameterize", "torch_internal_coords", "train_vae", "vae_loss",
]
