"""Estimator wrappers with fit / transform / sample and parameter introspection."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .batching import collate_structures
from .config import LossWeights, ModelConfig, SampleConfig, TrainConfig
from .diffengine import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .filtering import filter_structure
from .flowdit import FlowDenoiser, sample, train_dit
from .validation import check_config, check_graphs, check_seed, check_structures
from .vae import LatentAutoencoder, realize, train_vae, vae_loss


class StructureVAE(TransformerMixin, BaseEstimator):
    """Atom-wise autoencoder: ``transform`` gives posterior means, ``inverse_transform`` decodes them.

    Parameters
    ----------
    model_config, loss_weights, train_config : dataclass, dict or None
        Architecture, loss weights and optimisation schedule; None uses defaults.
    random_state : int or None
        Seed for initialisation, augmentation and latent sampling.
    """

    def __init__(self, model_config=None, loss_weights=None, train_config=None, random_state=None):
        self.model_config = model_config
        self.loss_weights = loss_weights
        self.train_config = train_config
        self.random_state = random_state

    def _build(self):
        seed = check_seed(self.random_state)
        torch.manual_seed(seed)
        return LatentAutoencoder(check_config(self.model_config, ModelConfig)), seed

    def fit(self, X, y=None, molecules=None, validation=None):
        structures = check_structures(X)
        model, seed = self._build()
        weights = check_config(self.loss_weights, LossWeights)
        cfg = check_config(self.train_config, TrainConfig)
        mols = check_structures(molecules, allow_empty=True) if molecules is not None else None
        val = check_structures(validation) if validation is not None else None
        result = train_vae(model, structures, weights, cfg, seed, mols, val)
        load_module_arrays(model, result.best_state)
        self.model_ = model
        self.history_ = result.history
        self.best_val_ = result.best_val
        self.n_steps_ = result.steps
        self.train_result_ = result
        return self

    def transform(self, X):
        """Posterior means, one (N_i, d) array per structure."""
        check_is_fitted(self, "model_")
        structures = check_structures(X)
        batch = collate_structures(structures)
        with torch.no_grad():
            mu, _ = self.model_.encode(batch)
        return [mu[k, :s.n_atoms].numpy().copy() for k, s in enumerate(structures)]

    def inverse_transform(self, Z, graphs):
        """Decode latents for the given graphs into structures."""
        check_is_fitted(self, "model_")
        graphs = check_graphs(graphs)
        if len(Z) != len(graphs):
            raise ValueError("one latent array per graph is required")
        from .batching import collate_graphs
        gb = collate_graphs(graphs)
        z = torch.zeros(gb.n_sys, gb.n_max, self.model_.latent_dim, dtype=torch.float64)
        for k, (zk, g) in enumerate(zip(Z, graphs)):
            zk = torch.as_tensor(np.asarray(zk), dtype=torch.float64)
            if zk.shape != (g.n_atoms, self.model_.latent_dim):
                raise ValueError(f"latent {k} has shape {tuple(zk.shape)}, expected {(g.n_atoms, self.model_.latent_dim)}")
            z[k, :g.n_atoms] = zk
        with torch.no_grad():
            cond, _ = self.model_.conditioner(gb)
            frac, pos, bbox = self.model_.decode(z, cond, gb.periodic, gb.mask)
        return realize(graphs, frac, pos, bbox)

    def reconstruct(self, X):
        structures = check_structures(X)
        return self.inverse_transform(self.transform(structures), [s.graph for s in structures])

    def score(self, X, y=None):
        """Negative mean total loss at the posterior means (higher is better)."""
        check_is_fitted(self, "model_")
        batch = collate_structures(check_structures(X))
        weights = check_config(self.loss_weights, LossWeights)
        with torch.no_grad():
            loss, _ = vae_loss(batch, self.model_(batch, sample=False), weights)
        return -float(loss)

    def save(self, path, config: dict | None = None) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, module_arrays(self.model_), config,
                        {"kind": "vae", "model": dataclasses.asdict(self.model_.cfg)})

    @classmethod
    def load(cls, path):
        arrays, manifest = load_checkpoint(path)
        extra = manifest.get("extra", {})
        if extra.get("kind") != "vae":
            raise ValueError(f"{path} is not an autoencoder checkpoint")
        est = cls(model_config=ModelConfig(**extra["model"]))
        model = LatentAutoencoder(ModelConfig(**extra["model"]))
        load_module_arrays(model, arrays)
        est.model_ = model
        est.config_hash_ = manifest["config_hash"]
        return est


class FlowGenerator(BaseEstimator):
    """Latent flow-matching generator on top of a fitted :class:`StructureVAE`.

    ``fit`` trains the denoiser on latents of the training structures;
    ``sample`` draws structures for graphs and ``predict`` returns one
    structure per graph.
    """

    def __init__(self, vae=None, model_config=None, train_config=None, sample_config=None, random_state=None):
        self.vae = vae
        self.model_config = model_config
        self.train_config = train_config
        self.sample_config = sample_config
        self.random_state = random_state

    def _vae_model(self) -> LatentAutoencoder:
        if self.vae is None:
            raise ValueError("a fitted StructureVAE is required")
        check_is_fitted(self.vae, "model_")
        return self.vae.model_

    def fit(self, X, y=None, molecules=None, validation=None):
        structures = check_structures(X)
        vae = self._vae_model()
        cfg = check_config(self.model_config, ModelConfig) if self.model_config is not None else vae.cfg
        seed = check_seed(self.random_state)
        torch.manual_seed(seed)
        dit = FlowDenoiser(cfg)
        if cfg.cond_hidden == vae.cfg.cond_hidden and cfg.cond_dim == vae.cfg.cond_dim \
                and cfg.cond_layers == vae.cfg.cond_layers:
            dit.conditioner.load_state_dict(vae.conditioner.state_dict())
        tcfg = check_config(self.train_config, TrainConfig) if self.train_config is not None else TrainConfig(epochs=500)
        mols = check_structures(molecules, allow_empty=True) if molecules is not None else None
        val = check_structures(validation) if validation is not None else None
        result = train_dit(dit, vae, structures, tcfg, seed, mols, val)
        load_module_arrays(dit, result.best_state)
        self.model_ = dit
        self.history_ = result.history
        self.best_val_ = result.best_val
        self.n_steps_ = result.steps
        self.train_result_ = result
        return self

    def sample(self, graphs, n: int | None = None, steps: int | None = None, random_state=None):
        """List (per graph) of :class:`~chaingen.flowdit.Generation` lists."""
        check_is_fitted(self, "model_")
        graphs = check_graphs(graphs)
        sc = check_config(self.sample_config, SampleConfig)
        n = sc.n_per_input if n is None else n
        steps = sc.steps if steps is None else steps
        seed = check_seed(self.random_state if random_state is None else random_state)
        vae = self._vae_model()
        return [sample(g, steps, seed, self.model_, vae, n, input_index=k) for k, g in enumerate(graphs)]

    def predict(self, X):
        """One generated structure (or None on numerical failure) per input graph."""
        return [gens[0].structure for gens in self.sample(X, n=1)]

    def success_rate(self, structures, n: int = 32, steps: int | None = None) -> float:
        """Mean filter success over ``n`` generations per reference structure."""
        refs = check_structures(structures)
        rates = []
        for ref, gens in zip(refs, self.sample([s.graph for s in refs], n, steps)):
            ok = [g.structure is not None and filter_structure(g.structure, ref.graph).success for g in gens]
            rates.append(float(np.mean(ok)))
        return float(np.mean(rates))

    def save(self, path, config: dict | None = None) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, module_arrays(self.model_), config,
                        {"kind": "dit", "model": dataclasses.asdict(self.model_.cfg)})

    @classmethod
    def load(cls, path, vae: StructureVAE):
        arrays, manifest = load_checkpoint(path)
        extra = manifest.get("extra", {})
        if extra.get("kind") != "dit":
            raise ValueError(f"{path} is not a denoiser checkpoint")
        cfg = ModelConfig(**extra["model"])
        est = cls(vae=vae, model_config=cfg)
        model = FlowDenoiser(cfg)
        load_module_arrays(model, arrays)
        est.model_ = model
        est.config_hash_ = manifest["config_hash"]
        return est
