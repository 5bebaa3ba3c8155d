import numpy as np
import pytest
import torch

import chaingen.flowdit as flow_mod
from chaingen.batching import collate_graphs, collate_structures
from chaingen.chemgraph import distance_class_tensor, parse_smiles
from chaingen.config import ModelConfig, TrainConfig
from chaingen.diffengine import gradient_check, load_module_arrays, module_arrays
from chaingen.flowdit import (
    DiTBlock,
    FlowDenoiser,
    denoise,
    euler_integrate,
    evaluate_dit,
    fm_loss,
    generation_seed,
    interpolate,
    sample,
    target_velocity,
    train_dit,
)
from chaingen.layers import biased_attention
from chaingen.vae import LatentAutoencoder

F64 = torch.float64
CFG = ModelConfig(latent_dim=4, cond_hidden=8, cond_dim=8, cond_layers=1, vae_width=8, vae_blocks=1, vae_heads=2,
                  dit_width=16, dit_blocks=2, dit_heads=4, bias_hidden=8)


def randomize_zero_init(module, seed=0):
    # adaLN-Zero starts every block as the identity; give the gates weight so tests see the whole network
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if torch.all(p == 0):
                p.copy_(0.2 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    vae = LatentAutoencoder(CFG)
    dit = randomize_zero_init(FlowDenoiser(CFG))
    return vae, dit


def single_inputs(dit, smiles, seed=0):
    g = parse_smiles(smiles)
    gen = torch.Generator().manual_seed(seed)
    zt = torch.randn(g.n_atoms, 4, generator=gen, dtype=F64)
    zsc = torch.randn(g.n_atoms, 4, generator=gen, dtype=F64)
    cond = dit.conditioner(collate_graphs([g]))[0][0]
    return g, zt, zsc, cond, torch.as_tensor(distance_class_tensor(g))


def test_interpolate_examples():
    z0, z1 = torch.zeros(3, 2, dtype=F64), torch.full((3, 2), 2.0, dtype=F64)
    assert torch.equal(interpolate(z0, z1, 0.0), z0)
    assert torch.equal(interpolate(z0, z1, 1.0), z1)
    assert torch.equal(interpolate(z0, z1, 0.5), torch.ones(3, 2, dtype=F64))
    with pytest.raises(ValueError):
        interpolate(z0, torch.zeros(2, 2, dtype=F64), 0.5)


def test_per_system_times():
    z0 = torch.zeros(2, 3, 4, dtype=F64)
    z1 = torch.ones(2, 3, 4, dtype=F64)
    zt = interpolate(z0, z1, torch.tensor([0.25, 0.75], dtype=F64))
    assert torch.all(zt[0] == 0.25) and torch.all(zt[1] == 0.75)


def test_target_velocity_examples():
    z1 = torch.ones(2, 3, dtype=F64)
    assert torch.all(target_velocity(z1, z1, 0.3) == 0)
    assert torch.all(target_velocity(z1, torch.zeros_like(z1), 0.5) == 2.0)
    with pytest.raises(ValueError):
        target_velocity(z1, z1, 1.0)


def test_straight_path_velocity_constant():
    gen = torch.Generator().manual_seed(0)
    z0 = torch.randn(7, 8, generator=gen, dtype=F64)
    z1 = torch.randn(7, 8, generator=gen, dtype=F64)
    for t in (0.1, 0.5, 0.8):
        u = target_velocity(z1, interpolate(z0, z1, t), t)
        assert torch.max(torch.abs(u - (z1 - z0))) <= 1e-12


@pytest.mark.parametrize("steps", [1, 4, 100])
def test_euler_exact_velocity_reaches_target(steps):
    gen = torch.Generator().manual_seed(steps)
    z0 = torch.randn(5, 8, generator=gen, dtype=F64)
    z1 = torch.randn(5, 8, generator=gen, dtype=F64)
    # x-prediction oracle: the exact clean latent at every step
    out = euler_integrate(lambda z, zsc, t: z1, z0, steps)
    assert torch.max(torch.abs(out - z1)) <= 1e-9
    # velocity oracle plugged into the plain Euler update
    z, dt = z0, 1.0 / steps
    for k in range(steps):
        z = z + dt * (z1 - z0)
    assert torch.max(torch.abs(z - z1)) <= 1e-9


def test_euler_self_conditioning_feed():
    seen = []

    def predict(z, zsc, t):
        seen.append((t, None if zsc is None else float(zsc.flatten()[0])))
        return torch.full_like(z, 10 * t + 1)

    euler_integrate(predict, torch.zeros(1, 1, dtype=F64), 4)
    assert seen == [(0.0, None), (0.25, 1.0), (0.5, 3.5), (0.75, 6.0)]
    with pytest.raises(ValueError):
        euler_integrate(predict, torch.zeros(1, 1, dtype=F64), 0)


def test_fm_loss_prefactor():
    gen = torch.Generator().manual_seed(1)
    z1 = torch.randn(6, 8, generator=gen, dtype=F64)
    z1_hat = torch.randn(6, 8, generator=gen, dtype=F64)
    mse = ((z1 - z1_hat) ** 2).sum(-1).mean()
    assert float(fm_loss(z1, z1, 0.7)) == 0.0
    assert float(fm_loss(z1_hat, z1, 0.5)) == float(4 * mse)
    assert float(fm_loss(z1_hat, z1, 0.99)) == float(100 * mse)
    assert float(fm_loss(z1_hat, z1, 0.9)) == float(fm_loss(z1_hat, z1, 0.99))
    assert float(fm_loss(z1_hat, z1, 1.0)) == float(fm_loss(z1_hat, z1, 0.9))


def test_fm_loss_ignores_padding():
    gen = torch.Generator().manual_seed(2)
    z1 = torch.randn(1, 5, 4, generator=gen, dtype=F64)
    z1_hat = torch.randn(1, 5, 4, generator=gen, dtype=F64)
    mask = torch.tensor([[True, True, True, False, False]])
    padded = z1_hat.clone()
    padded[0, 3:] += 100.0
    assert float(fm_loss(padded, z1, 0.2, mask)) == float(fm_loss(z1_hat, z1, 0.2, mask))
    assert float(fm_loss(z1_hat, z1, 0.2, mask)) == pytest.approx(float(fm_loss(z1_hat[0, :3], z1[0, :3], 0.2)),
                                                                  rel=1e-14)


def attention_inputs(seed=0, n=6, heads=4, dh=5):
    gen = torch.Generator().manual_seed(seed)
    return [torch.randn(2, heads, n, dh, generator=gen, dtype=F64) for _ in range(3)]


def test_zero_bias_reduction_bit_exact():
    q, k, v = attention_inputs()
    a, wa = biased_attention(q, k, v, None, scale=2.0)
    b, wb = biased_attention(q, k, v, torch.zeros(2, 4, 6, 6, dtype=F64), scale=2.0)
    assert torch.equal(a, b) and torch.equal(wa, wb)
    assert torch.max(torch.abs(wa.sum(-1) - 1)) <= 1e-12


def test_saturated_bias_concentrates_on_bonded():
    g = parse_smiles("[*]CC(O)C[*]")
    dist = torch.as_tensor(distance_class_tensor(g))
    bonded = dist[..., 1]
    bias = torch.where(bonded > 0, 1e4, -1e4)[None, None].expand(2, 4, -1, -1)
    q, k, v = attention_inputs(n=g.n_atoms)
    _, w = biased_attention(q, k, v, bias, scale=2.0)
    mass = (w * bonded).sum(-1)
    assert torch.min(mass) >= 1 - 1e-6


def test_nonfinite_bias_rejected():
    q, k, v = attention_inputs()
    bias = torch.zeros(1, 1, 6, 6, dtype=F64)
    bias[0, 0, 1, 2] = float("nan")
    with pytest.raises(ValueError):
        biased_attention(q, k, v, bias)


def test_denoiser_shape_and_errors(models):
    _, dit = models
    g, zt, zsc, cond, dist = single_inputs(dit, "[*]CC(O)C[*]")
    assert denoise(zt, zsc, 0.3, cond, 0, dist, dit).shape == zt.shape
    with pytest.raises(ValueError):
        denoise(zt, zsc, 0.3, cond, 5, dist, dit)
    with pytest.raises(ValueError):
        denoise(zt, zsc, 0.3, cond, 0, dist[:-1, :-1], dit)


def test_denoiser_permutation_equivariance(models):
    _, dit = models
    rng = np.random.default_rng(0)
    worst = 0.0
    for smi in ("[*]CC(O)C[*]", "[*]OCC(F)[*]", "CC(C)O"):
        g, zt, zsc, cond, dist = single_inputs(dit, smi)
        base = denoise(zt, zsc, 0.4, cond, 0, dist, dit)
        for _ in range(5):
            p = torch.as_tensor(rng.permutation(g.n_atoms))
            out = denoise(zt[p], zsc[p], 0.4, cond[p], 0, dist[p][:, p], dit)
            worst = max(worst, float(torch.max(torch.abs(out - base[p])).detach()))
    assert worst <= 1e-9


def test_dataset_embedding_is_live(models):
    _, dit = models
    g, zt, zsc, cond, dist = single_inputs(dit, "[*]CC(O)C[*]")
    assert not torch.allclose(denoise(zt, zsc, 0.4, cond, 0, dist, dit), denoise(zt, zsc, 0.4, cond, 1, dist, dit))


def test_self_conditioning_channel_is_live(models):
    _, dit = models
    g, zt, zsc, cond, dist = single_inputs(dit, "[*]CC(O)C[*]")
    absent = denoise(zt, None, 0.4, cond, 0, dist, dit)
    assert torch.equal(absent, denoise(zt, torch.zeros_like(zsc), 0.4, cond, 0, dist, dit))
    assert not torch.allclose(absent, denoise(zt, zsc, 0.4, cond, 0, dist, dit))


def test_zeroed_bias_network_matches_vanilla_attention(models):
    _, dit = models
    vanilla = FlowDenoiser(ModelConfig(**{**CFG.__dict__, "bias_mode": "none"}))
    state = {k: v for k, v in dit.state_dict().items() if ".bias.mlp." not in k}
    vanilla.load_state_dict(state)
    zeroed = FlowDenoiser(CFG)
    zeroed.load_state_dict(dit.state_dict())
    with torch.no_grad():
        for block in zeroed.blocks:
            block.bias.mlp[2].weight.zero_()
            block.bias.mlp[2].bias.zero_()
    g, zt, zsc, cond, dist = single_inputs(dit, "[*]CC(O)C[*]")
    assert torch.equal(denoise(zt, zsc, 0.4, cond, 0, dist, zeroed), denoise(zt, zsc, 0.4, cond, 0, dist, vanilla))
    assert not torch.equal(denoise(zt, zsc, 0.4, cond, 0, dist, dit), denoise(zt, zsc, 0.4, cond, 0, dist, vanilla))


def test_scalar_bias_shared_across_heads():
    torch.manual_seed(0)
    block = randomize_zero_init(DiTBlock(16, 4, bias_mode="scalar", bias_hidden=8).to(F64))
    dist = torch.as_tensor(distance_class_tensor(parse_smiles("CCO")))[None]
    assert block.bias(dist).shape == (1, 1, 9, 9)


def test_dit_block_gradients():
    torch.manual_seed(1)
    block = randomize_zero_init(DiTBlock(8, 2, mlp_ratio=2, bias_hidden=4).to(F64))
    g = parse_smiles("[*]CC(O)[*]")
    n = g.n_atoms
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(1, n, 8, generator=gen, dtype=F64, requires_grad=True)
    c = torch.randn(1, 8, generator=gen, dtype=F64, requires_grad=True)
    w = torch.randn(1, n, 8, generator=gen, dtype=F64)
    mask = torch.ones(1, n, dtype=torch.bool)
    dist = torch.as_tensor(distance_class_tensor(g))[None]
    params = {**dict(block.named_parameters()), "x": x, "c": c}
    # the last bias-MLP offset shifts whole softmax rows, so its gradient is exactly zero
    shift = params.pop("bias.mlp.2.bias")
    errors = gradient_check(lambda: (block(x, c, mask, dist) * w).sum(), params, max_entries=8)
    assert max(errors.values()) <= 1e-4, errors
    (block(x, c, mask, dist) * w).sum().backward()
    assert float(shift.grad.abs().max()) <= 1e-12


def train_cfg(**kw):
    base = dict(epochs=10**6, max_steps=100, batch_size=4, upsample=1, augment=False, lr=2e-3, warmup_steps=10,
                val_every=50)
    base.update(kw)
    return TrainConfig(**base)


def test_flow_loss_decreases(small_corpus):
    torch.manual_seed(0)
    vae = LatentAutoencoder(CFG)
    dit = FlowDenoiser(CFG)
    dit.latent_scale.copy_(flow_mod.latent_statistics(vae, small_corpus))
    before = evaluate_dit(dit, vae, small_corpus, seed=3)
    train_dit(dit, vae, small_corpus, train_cfg(), seed=3)
    assert evaluate_dit(dit, vae, small_corpus, seed=3) < 0.7 * before


def test_self_conditioning_probability_respected(small_corpus):
    torch.manual_seed(0)
    vae = LatentAutoencoder(CFG)
    res = train_dit(FlowDenoiser(CFG), vae, small_corpus, train_cfg(max_steps=12, self_cond_prob=0.0))
    assert res.counters["first_pass"] == 0 and res.counters["steps"] == 12
    res = train_dit(FlowDenoiser(CFG), vae, small_corpus, train_cfg(max_steps=12, self_cond_prob=1.0))
    assert res.counters["first_pass"] == 12


def test_first_pass_is_detached(small_corpus, monkeypatch):
    torch.manual_seed(0)
    vae = LatentAutoencoder(CFG)
    dit = FlowDenoiser(CFG)
    calls = []
    original = FlowDenoiser.forward

    def spy(self, zt, zsc, t, graph, cond=None):
        calls.append((zsc is None, zsc is not None and zsc.requires_grad, torch.is_grad_enabled()))
        return original(self, zt, zsc, t, graph, cond)

    monkeypatch.setattr(FlowDenoiser, "forward", spy)
    train_dit(dit, vae, small_corpus, train_cfg(max_steps=3, self_cond_prob=1.0, val_every=1000))
    train_calls = calls[:6]
    assert train_calls[0::2] == [(True, False, False)] * 3
    assert train_calls[1::2] == [(False, False, True)] * 3


def test_frozen_autoencoder_untouched(small_corpus):
    torch.manual_seed(0)
    vae = LatentAutoencoder(CFG)
    before = module_arrays(vae)
    train_dit(FlowDenoiser(CFG), vae, small_corpus, train_cfg(max_steps=5))
    after = module_arrays(vae)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_best_state_is_lowest_validation(small_corpus):
    torch.manual_seed(2)
    vae = LatentAutoencoder(CFG)
    dit = FlowDenoiser(CFG)
    res = train_dit(dit, vae, small_corpus, train_cfg(max_steps=30, val_every=5), seed=1)
    vals = [(v, s) for s, k, v in res.history if k == "val_fm"]
    assert (res.best_val, res.best_step) == min(vals)
    fresh = FlowDenoiser(CFG)
    load_module_arrays(fresh, res.best_state)
    assert evaluate_dit(fresh, vae, small_corpus, seed=1) == pytest.approx(res.best_val, rel=1e-12)


def test_single_step_sample_decodes_first_prediction(models):
    vae, dit = models
    g = parse_smiles("[*]CC(O)C[*]")
    (gen,) = sample(g, 1, 5, dit, vae, n=1)
    gb = collate_graphs([g])
    z0 = torch.randn((g.n_atoms, 4), generator=torch.Generator().manual_seed(gen.seed), dtype=F64)[None]
    with torch.no_grad():
        z1_hat = dit(z0, None, 0.0, gb) * dit.latent_scale
        frac, pos, bbox = vae.decode(z1_hat, vae.conditioner(gb)[0], gb.periodic, gb.mask)
    expected = flow_mod.realize([g], frac, pos, bbox)[0]
    np.testing.assert_array_equal(gen.structure.cart, expected.cart)
    assert gen.structure.cell.c == expected.cell.c


def test_sampling_deterministic_and_diverse(models):
    vae, dit = models
    g = parse_smiles("[*]CC(O)C[*]")
    a = sample(g, 5, 11, dit, vae, n=100)
    b = sample(g, 5, 11, dit, vae, n=100)
    for x, y in zip(a, b):
        assert x.seed == y.seed
        np.testing.assert_array_equal(x.structure.cart, y.structure.cart)
    carts = {x.structure.cart.tobytes() for x in a}
    assert len(carts) == 100


def test_sample_independent_of_batch_size(models):
    vae, dit = models
    g = parse_smiles("[*]OCC[*]")
    many = sample(g, 4, 2, dit, vae, n=5)
    few = sample(g, 4, 2, dit, vae, n=2)
    np.testing.assert_allclose(many[1].structure.cart, few[1].structure.cart, atol=1e-9)


def test_nonfinite_latent_marks_failure(models, monkeypatch):
    vae, dit = models
    g = parse_smiles("[*]CC[*]")
    original = FlowDenoiser.forward
    state = {"k": 0}

    def poisoned(self, zt, zsc, t, graph, cond=None):
        out = original(self, zt, zsc, t, graph, cond)
        state["k"] += 1
        if state["k"] == 3:
            out = out.clone()
            out[1] = float("nan")
        return out

    monkeypatch.setattr(FlowDenoiser, "forward", poisoned)
    gens = sample(g, 6, 0, dit, vae, n=3)
    assert gens[1].structure is None and gens[1].failed_step == 2
    assert gens[0].structure is not None and gens[0].failed_step is None


def test_generation_seed_streams():
    seeds = {generation_seed(0, i, k) for i in range(10) for k in range(10)}
    assert len(seeds) == 100
    assert generation_seed(3, 1, 2) == generation_seed(3, 1, 2)
    assert 0 <= generation_seed(3, 1, 2) < 2**63


def test_permuted_sampling_pipeline(models):
    vae, dit = models
    g = parse_smiles("[*]CC(O)C[*]")
    perm = np.random.default_rng(4).permutation(g.n_atoms)
    gp = g.permute(perm)
    batch = collate_graphs([g])
    z0 = torch.randn(1, g.n_atoms, 4, generator=torch.Generator().manual_seed(0), dtype=F64)
    pb = collate_graphs([gp])
    # reuse permuted encodings so both graphs see the same conditioning basis
    pb.rw, pb.lap = batch.rw[:, perm], batch.lap[:, perm]
    with torch.no_grad():
        a = euler_integrate(lambda z, zsc, t: dit(z, zsc, t, batch), z0, 10)
        b = euler_integrate(lambda z, zsc, t: dit(z, zsc, t, pb), z0[:, perm], 10)
    assert torch.max(torch.abs(b - a[:, perm])) <= 1e-9


def test_structure_batch_latents_masked(small_corpus, models):
    vae, _ = models
    batch = collate_structures(small_corpus)
    stats = flow_mod.latent_statistics(vae, small_corpus)
    assert stats.shape == (4,) and torch.all(stats >= 1e-3)
    assert batch.graph.mask.sum() == sum(s.n_atoms for s in small_corpus)
