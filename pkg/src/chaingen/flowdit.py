"""Latent flow-matching denoiser and its Euler sampler.

The denoiser predicts the clean latent ``Z1`` from a point ``Z_t`` on the
straight path between Gaussian noise and data.  Atom tokens carry the noisy
latent, an optional self-conditioning estimate and the graph conditioning;
a per-system vector built from the dataset embedding and the time embedding
modulates every block, and each attention layer adds a learned bias looked
up from the bonded-distance class of every atom pair.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np
import torch
from torch import nn

from .batching import GraphBatch, collate_graphs, collate_structures
from .conditioner import GraphConditioner
from .config import ModelConfig, TrainConfig
from .diffengine import DTYPE, Adam, module_arrays, named_parameters
from .layers import MLP, MultiHeadAttention, to_dtype
from .vae import (LatentAutoencoder, TrainingDiverged, TrainResult, batch_stream, lr_at, realize,
                  reparameterize, steps_per_epoch, total_steps)

log = logging.getLogger(__name__)

FREQ_DIM = 64


# ----------------------------------------------------------------------------
# flow algebra


def interpolate(z0: torch.Tensor, z1: torch.Tensor, t) -> torch.Tensor:
    """Point ``(1 - t) z0 + t z1`` on the straight path; ``t`` is a scalar or per-system (B,)."""
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {tuple(z0.shape)} vs {tuple(z1.shape)}")
    t = _expand_t(t, z0)
    return (1 - t) * z0 + t * z1


def target_velocity(z1: torch.Tensor, zt: torch.Tensor, t) -> torch.Tensor:
    """Velocity ``(z1 - zt) / (1 - t)`` that carries ``zt`` to ``z1`` by time 1."""
    tt = torch.as_tensor(t, dtype=z1.dtype)
    if (tt >= 1).any():
        raise ValueError("target velocity is undefined at t >= 1")
    return (z1 - zt) / (1 - _expand_t(t, z1))


def _expand_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    if t.dim() == 0:
        return t
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def fm_loss(z1_hat: torch.Tensor, z1: torch.Tensor, t, mask: torch.Tensor | None = None,
            t_clip: float = 0.9) -> torch.Tensor:
    """``(1 - min(t, t_clip))^-2`` times the per-atom squared error, averaged over atoms then systems.

    Inputs are (B, N, d) with per-system ``t`` (B,) or (N, d) with scalar ``t``.
    """
    if z1_hat.dim() == 2:
        z1_hat, z1 = z1_hat[None], z1[None]
        mask = None if mask is None else mask[None]
    t = torch.as_tensor(t, dtype=z1.dtype).reshape(-1).expand(z1.shape[0])
    # the clipped weight comes from the decimal clip value, so t_clip=0.9 weighs exactly 100
    clip_weight = float(1 / (1 - Decimal(repr(t_clip))) ** 2)
    weight = torch.where(t >= t_clip, clip_weight, 1 / (1 - torch.clamp(t, max=t_clip)) ** 2)
    sq = ((z1 - z1_hat) ** 2).sum(-1)
    if mask is None:
        per_sys = sq.mean(-1)
    else:
        m = mask.to(sq.dtype)
        per_sys = (sq * m).sum(-1) / m.sum(-1)
    return (per_sys * weight).mean()


# ----------------------------------------------------------------------------
# network


def timestep_features(t: torch.Tensor, dim: int = FREQ_DIM, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / half)
    args = t.to(DTYPE)[:, None] * 1000.0 * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.mlp = MLP(FREQ_DIM, width, width)

    def forward(self, t):
        return self.mlp(timestep_features(t))


def modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class DistanceBias(nn.Module):
    """Maps the 5-channel bonded-distance class of each pair to per-head logit offsets."""

    def __init__(self, heads: int, hidden: int, mode: str = "per_head"):
        super().__init__()
        self.heads = heads
        self.mode = mode
        self.mlp = MLP(5, hidden, heads if mode == "per_head" else 1)

    def forward(self, dist: torch.Tensor) -> torch.Tensor:
        out = self.mlp(dist).permute(0, 3, 1, 2)   # (B, H|1, N, N)
        return out


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4, scale_mode: str = "num_heads",
                 bias_mode: str = "per_head", bias_hidden: int = 32):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.attn = MultiHeadAttention(width, heads, scale_mode)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.mlp = MLP(width, mlp_ratio * width, width)
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)
        self.bias = DistanceBias(heads, bias_hidden, bias_mode) if bias_mode != "none" else None

    def forward(self, x, c, mask, dist):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(c).chunk(6, dim=-1)
        bias = self.bias(dist) if self.bias is not None else None
        h = self.attn(modulate(self.norm1(x), shift1, scale1), mask, bias)
        x = x + gate1[:, None, :] * h
        h = self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x + gate2[:, None, :] * h


class FlowDenoiser(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        w, d = cfg.dit_width, cfg.latent_dim
        self.conditioner = GraphConditioner(cfg.cond_hidden, cfg.cond_dim, cfg.cond_layers)
        self.z_in = nn.Linear(2 * d, w)
        self.c_in = nn.Linear(cfg.cond_dim, w) if cfg.cond_dim != w else nn.Identity()
        self.t_embed = TimestepEmbedder(w)
        self.dataset_embed = nn.Embedding(cfg.n_datasets, w)
        self.blocks = nn.ModuleList(
            DiTBlock(w, cfg.dit_heads, cfg.mlp_ratio, cfg.attn_scale, cfg.bias_mode, cfg.bias_hidden)
            for _ in range(cfg.dit_blocks)
        )
        self.final_norm = nn.LayerNorm(w, elementwise_affine=False)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(w, 2 * w))
        nn.init.zeros_(self.final_ada[1].weight)
        nn.init.zeros_(self.final_ada[1].bias)
        self.out = nn.Linear(w, d)
        # per-dimension latent scale; latents are divided by it before noising
        self.register_buffer("latent_scale", torch.ones(d))
        to_dtype(self)

    def forward(self, zt, zsc, t, graph: GraphBatch, cond: torch.Tensor | None = None):
        """Predict the clean latent (B, N, d) from ``zt``; ``zsc`` None means no self-conditioning."""
        if cond is None:
            cond, _ = self.conditioner(graph)
        if zsc is None:
            zsc = torch.zeros_like(zt)
        ds = graph.dataset
        if (ds < 0).any() or (ds >= self.cfg.n_datasets).any():
            raise ValueError(f"dataset id out of range [0, {self.cfg.n_datasets})")
        b, n = graph.mask.shape
        if zt.shape[:2] != (b, n) or graph.dist.shape[:3] != (b, n, n):
            raise ValueError("latent, mask and distance-class shapes disagree")
        t = torch.as_tensor(t, dtype=zt.dtype).reshape(-1).expand(b)
        x = self.z_in(torch.cat([zt, zsc], dim=-1)) + self.c_in(cond)
        c = self.dataset_embed(ds) + self.t_embed(t)
        for block in self.blocks:
            x = block(x, c, graph.mask, graph.dist)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        z = self.out(modulate(self.final_norm(x), shift, scale))
        return z * graph.mask.unsqueeze(-1)


def denoise(zt, zsc, t, cond, dataset, dist, model: FlowDenoiser, mask=None):
    """Single-system convenience wrapper: (N, d) latents, (N, d_cond) conditioning, (N, N, 5) classes."""
    n = zt.shape[0]
    if dist.shape != (n, n, 5):
        raise ValueError(f"distance classes must be ({n}, {n}, 5), got {tuple(dist.shape)}")
    if cond.shape[0] != n:
        raise ValueError("conditioning rows do not match atoms")
    mask = torch.ones(1, n, dtype=torch.bool) if mask is None else mask[None]
    gb = GraphBatch(1, n, mask, None, None, None, None, None, None, torch.as_tensor(dist, dtype=DTYPE)[None],
                    None, torch.as_tensor([dataset]), None, [])
    out = model(zt[None], None if zsc is None else zsc[None], t, gb, cond[None])
    return out[0]


# ----------------------------------------------------------------------------
# training


@torch.no_grad()
def latent_statistics(vae: LatentAutoencoder, structures, batch_size: int = 64) -> torch.Tensor:
    """Per-dimension RMS of the posterior means over ``structures`` (floored at 1e-3)."""
    total = torch.zeros(vae.latent_dim, dtype=DTYPE)
    count = 0
    for start in range(0, len(structures), batch_size):
        batch = collate_structures(structures[start:start + batch_size])
        mu, _ = vae.encode(batch)
        m = batch.graph.mask
        total += (mu[m] ** 2).sum(0)
        count += int(m.sum())
    return torch.sqrt(total / max(count, 1)).clamp_min(1e-3)


@dataclass
class FlowTrainResult(TrainResult):
    counters: dict = field(default_factory=lambda: {"first_pass": 0, "steps": 0})


def _flow_step_loss(dit, vae, batch, gen, rng, cfg: TrainConfig, counters):
    g = batch.graph
    with torch.no_grad():
        mu, log_sigma = vae.encode(batch)
        z1 = reparameterize(mu, log_sigma.exp(), gen) / dit.latent_scale
    mask = g.mask.unsqueeze(-1)
    z1 = z1 * mask
    t = torch.rand(g.n_sys, generator=gen, dtype=DTYPE)
    z0 = torch.randn(z1.shape, generator=gen, dtype=DTYPE) * mask
    zt = interpolate(z0, z1, t)
    cond, _ = dit.conditioner(g)
    zsc = None
    if cfg.self_cond_prob > 0 and rng.random() < cfg.self_cond_prob:
        counters["first_pass"] += 1
        with torch.no_grad():
            zsc = dit(zt, None, t, g, cond).detach()
    z1_hat = dit(zt, zsc, t, g, cond)
    return fm_loss(z1_hat, z1, t, g.mask, cfg.t_clip)


def train_dit(dit: FlowDenoiser, vae: LatentAutoencoder, polymers, cfg: TrainConfig | None = None,
              seed: int = 0, molecules=None, val=None, start_step: int = 0,
              optimizer: Adam | None = None, fit_scale: bool = True) -> FlowTrainResult:
    """Train the denoiser against latents from a frozen autoencoder.

    Validation uses the flow loss on a fixed noise draw so successive
    evaluations are comparable; the lowest value selects the returned state.
    """
    cfg = cfg or TrainConfig(epochs=500)
    molecules = list(molecules or [])
    val = list(val) if val else list(polymers)
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    if fit_scale:
        dit.latent_scale.copy_(latent_statistics(vae, list(polymers) + molecules))
    params = named_parameters([("", dit)])
    opt = optimizer or Adam(params, lr=cfg.lr, clip_norm=cfg.clip_norm)
    total = total_steps(len(polymers), len(molecules), cfg)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng([seed, 7])
    res = FlowTrainResult(module_arrays(dit), float("inf"), -1, 0)
    val_every = cfg.val_every or steps_per_epoch(len(polymers), len(molecules), cfg)
    bad = 0
    for step, epoch, ds, records in batch_stream(polymers, molecules, cfg, seed + 1, start_step, total):
        batch = collate_structures(records, [ds] * len(records))
        opt.lr = lr_at(step, total, cfg)
        opt.zero_grad()
        loss = _flow_step_loss(dit, vae, batch, gen, rng, cfg, res.counters)
        res.counters["steps"] += 1
        if not torch.isfinite(loss):
            bad += 1
            opt.skipped += 1
            log.warning("step %d: non-finite flow loss, skipped (%d consecutive)", step, bad)
            if bad >= cfg.max_bad_steps:
                raise TrainingDiverged(f"{bad} consecutive non-finite losses at step {step}")
            continue
        bad = 0
        loss.backward()
        opt.step()
        res.history.append((step, "fm", loss.item()))
        if (step + 1) % val_every == 0 or step + 1 == total:
            v = evaluate_dit(dit, vae, val, seed, cfg.t_clip)
            res.history.append((step + 1, "val_fm", v))
            if v < res.best_val:
                res.best_val, res.best_step = v, step + 1
                res.best_state = module_arrays(dit)
            log.info("step %d fm %.5f val %.5f", step + 1, loss.item(), v)
    res.steps = max(total, start_step)
    res.counters["optimizer"] = opt
    res.skipped = opt.skipped
    return res


@torch.no_grad()
def evaluate_dit(dit: FlowDenoiser, vae: LatentAutoencoder, structures, seed: int = 0,
                 t_clip: float = 0.9, batch_size: int = 64) -> float:
    gen = torch.Generator().manual_seed(seed + 12345)
    total, count = 0.0, 0
    for start in range(0, len(structures), batch_size):
        chunk = structures[start:start + batch_size]
        batch = collate_structures(chunk)
        g = batch.graph
        mu, _ = vae.encode(batch)
        z1 = mu / dit.latent_scale * g.mask.unsqueeze(-1)
        t = torch.rand(g.n_sys, generator=gen, dtype=DTYPE)
        z0 = torch.randn(z1.shape, generator=gen, dtype=DTYPE) * g.mask.unsqueeze(-1)
        zt = interpolate(z0, z1, t)
        total += float(fm_loss(dit(zt, None, t, g), z1, t, g.mask, t_clip)) * len(chunk)
        count += len(chunk)
    return total / count


# ----------------------------------------------------------------------------
# sampling


def euler_integrate(predict, z0: torch.Tensor, steps: int, on_step=None) -> torch.Tensor:
    """Integrate from noise with ``steps`` Euler steps of the x-prediction ``predict(z, z_sc, t)``.

    At step k (t = k / steps) the velocity is ``(z1_hat - z) / (1 - t)``; the
    last step therefore lands on its ``z1_hat``.  ``z_sc`` is the previous
    step's prediction (None at the first step).
    """
    if steps < 1:
        raise ValueError("need at least one integration step")
    dt = 1.0 / steps
    z, zsc = z0, None
    for k in range(steps):
        t = k / steps
        z1_hat = predict(z, zsc, t)
        if on_step is not None:
            on_step(k, z1_hat)
        if k == steps - 1:
            z = z1_hat
        else:
            z = z + dt * (z1_hat - z) / (1 - t)
        zsc = z1_hat
    return z


def generation_seed(seed: int, input_index: int, gen_index: int) -> int:
    """Independent per-generation stream, stable under batching and ordering."""
    return int(np.random.SeedSequence([seed, input_index, gen_index]).generate_state(1, np.uint64)[0] >> 1)


@dataclass
class Generation:
    structure: object          # Structure or None
    seed: int
    failed_step: int | None = None


@torch.no_grad()
def sample(graph, steps: int, seed: int, dit: FlowDenoiser, vae: LatentAutoencoder, n: int = 1,
           input_index: int = 0, dataset: int = 0) -> list[Generation]:
    """Draw ``n`` structures for one graph by Euler integration and decoding."""
    dit.eval()
    vae.eval()
    seeds = [generation_seed(seed, input_index, k) for k in range(n)]
    gb = collate_graphs([graph] * n, [dataset] * n)
    d = dit.cfg.latent_dim
    z0 = torch.stack([
        torch.randn((graph.n_atoms, d), generator=torch.Generator().manual_seed(s), dtype=DTYPE) for s in seeds
    ])
    cond, _ = dit.conditioner(gb)
    failed = [None] * n

    def predict(z, zsc, t):
        return dit(z, zsc, t, gb, cond)

    def watch(k, z1_hat):
        bad = ~torch.isfinite(z1_hat).reshape(n, -1).all(dim=1)
        for j in torch.nonzero(bad).flatten().tolist():
            if failed[j] is None:
                failed[j] = k

    z = euler_integrate(predict, z0, steps, watch)
    z = torch.nan_to_num(z * dit.latent_scale, nan=0.0, posinf=0.0, neginf=0.0)
    vcond, _ = vae.conditioner(gb)
    frac, pos, bbox = vae.decode(z, vcond, gb.periodic, gb.mask)
    structures = realize(gb.graphs, frac, pos, bbox)
    out = []
    for k in range(n):
        s = structures[k] if failed[k] is None else None
        if s is None and failed[k] is None:
            failed[k] = steps
        out.append(Generation(s, seeds[k], failed[k]))
    return out


__all__ = [
    "DiTBlock", "DistanceBias", "FlowDenoiser", "FlowTrainResult", "Generation", "TimestepEmbedder",
    "denoise", "euler_integrate", "evaluate_dit", "fm_loss", "generation_seed", "interpolate",
    "latent_statistics", "modulate", "sample", "target_velocity", "timestep_features", "train_dit",
]
