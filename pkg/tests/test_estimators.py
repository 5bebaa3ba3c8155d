import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from chaingen.config import ModelConfig, TrainConfig
from chaingen.estimators import FlowGenerator, StructureVAE
from chaingen.validation import check_config, check_graphs, check_seed, check_structures

MODEL = {"latent_dim": 4, "cond_hidden": 8, "cond_dim": 8, "cond_layers": 1, "vae_width": 8, "vae_blocks": 1,
         "vae_heads": 2, "dit_width": 8, "dit_blocks": 1, "dit_heads": 2, "bias_hidden": 4}
SCHEDULE = {"epochs": 10, "max_steps": 6, "batch_size": 2, "upsample": 1, "warmup_steps": 1, "augment": False}


@pytest.fixture(scope="module")
def fitted(small_corpus):
    vae = StructureVAE(MODEL, train_config=SCHEDULE, random_state=0).fit(small_corpus)
    gen = FlowGenerator(vae, train_config=SCHEDULE, sample_config={"steps": 3, "n_per_input": 2},
                        random_state=0).fit(small_corpus)
    return vae, gen


def test_params_and_clone():
    est = StructureVAE(MODEL, random_state=4)
    assert est.get_params()["random_state"] == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    est.set_params(random_state=5)
    assert est.random_state == 5


def test_not_fitted(small_corpus):
    with pytest.raises(NotFittedError):
        StructureVAE().transform(small_corpus)
    with pytest.raises(ValueError):
        FlowGenerator().fit(small_corpus)


def test_transform_and_inverse(fitted, small_corpus):
    vae, _ = fitted
    z = vae.transform(small_corpus)
    assert [a.shape for a in z] == [(s.n_atoms, 4) for s in small_corpus]
    rec = vae.inverse_transform(z, [s.graph for s in small_corpus])
    assert all(r.n_atoms == s.n_atoms and r.periodic for r, s in zip(rec, small_corpus))
    direct = vae.reconstruct(small_corpus)
    np.testing.assert_allclose(direct[0].cart, rec[0].cart, atol=1e-12)
    with pytest.raises(ValueError):
        vae.inverse_transform([z[0][:-1]], [small_corpus[0].graph])


def test_fit_deterministic(small_corpus, fitted):
    vae, _ = fitted
    again = StructureVAE(MODEL, train_config=SCHEDULE, random_state=0).fit(small_corpus)
    np.testing.assert_array_equal(again.transform(small_corpus)[1], vae.transform(small_corpus)[1])
    assert again.n_steps_ == 6


def test_score_is_negative_loss(fitted, small_corpus):
    vae, _ = fitted
    assert vae.score(small_corpus) == pytest.approx(-vae.train_result_.best_val, rel=1e-9)


def test_save_load(fitted, small_corpus, tmp_path):
    vae, gen = fitted
    vae.save(tmp_path / "vae.ckpt")
    gen.save(tmp_path / "dit.ckpt")
    vae2 = StructureVAE.load(tmp_path / "vae.ckpt")
    np.testing.assert_array_equal(vae2.transform(small_corpus)[0], vae.transform(small_corpus)[0])
    gen2 = FlowGenerator.load(tmp_path / "dit.ckpt", vae2)
    a = gen.sample([small_corpus[0].graph], n=2, steps=3)[0]
    b = gen2.sample([small_corpus[0].graph], n=2, steps=3)[0]
    np.testing.assert_array_equal(a[1].structure.cart, b[1].structure.cart)
    with pytest.raises(ValueError):
        StructureVAE.load(tmp_path / "dit.ckpt")


def test_sample_and_predict(fitted, small_corpus):
    _, gen = fitted
    out = gen.sample(["[*]CC[*]", small_corpus[1].graph])
    assert [len(g) for g in out] == [2, 2]
    preds = gen.predict([s.graph for s in small_corpus])
    assert len(preds) == len(small_corpus)
    rate = gen.success_rate(small_corpus, n=2, steps=3)
    assert 0.0 <= rate <= 1.0


def test_validation_helpers(small_corpus):
    assert check_structures(small_corpus[0]) == [small_corpus[0]]
    with pytest.raises(TypeError):
        check_structures([3])
    with pytest.raises(ValueError):
        check_structures([])
    assert check_graphs("CC")[0].n_atoms == 8
    with pytest.raises(ValueError):
        check_seed(-1)
    assert check_seed(None) == 0
    assert check_config({"lr": 0.1}, TrainConfig).lr == 0.1
    with pytest.raises(ValueError):
        check_config({"nope": 1}, ModelConfig)
    with pytest.raises(TypeError):
        check_config(3, ModelConfig)
