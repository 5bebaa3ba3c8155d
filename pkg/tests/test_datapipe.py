import json
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaingen.datapipe import (
    MOLECULE_DATASET,
    POLYMER_DATASET,
    DatasetManifest,
    SynthError,
    SynthSpec,
    assign_splits,
    augment,
    ideal_length,
    make_epoch,
    quaternion_matrix,
    synth_dataset,
    write_dataset,
)
from chaingen.filtering import filter_structure
from chaingen.geometry import internal_coords, perceive_structure

POLYETHYLENE = SynthSpec(count=3, backbone_min=4, backbone_max=4, branch_prob=0.0, hetero_prob=0.0)


def test_polyethylene_geometry():
    for s in synth_dataset(POLYETHYLENE, np.random.default_rng(0)):
        assert s.elements.count("C") == 4 and s.elements.count("H") == 8
        ic = internal_coords(s)
        cc = [length for length, (i, j, _) in zip(ic.bond_lengths, ic.index.bonds)
              if s.elements[i] == s.elements[j] == "C"]
        np.testing.assert_allclose(cc, 1.54, atol=1e-9)
        ccc = [a for a, t in zip(ic.angles, ic.index.angles) if all(s.elements[k] == "C" for k in t)]
        np.testing.assert_allclose(ccc, math.degrees(math.acos(-1 / 3)), atol=1e-9)
        per_unit = 2 * 1.54 * math.sin(math.radians(109.4712206) / 2)
        assert s.cell.c == pytest.approx(2 * per_unit, abs=1e-6)
        assert per_unit == pytest.approx(2.515, abs=1e-3)


def test_every_structure_passes_filter(corpus, molecules):
    for s in list(corpus) + list(molecules):
        assert filter_structure(s, s.graph).success


def test_perceived_graph_matches_generated(corpus):
    for s in corpus:
        assert perceive_structure(s).graph.edge_set() == s.graph.edge_set()


def test_synth_deterministic():
    spec = SynthSpec(count=5, backbone_max=8)
    a = synth_dataset(spec, np.random.default_rng(9))
    b = synth_dataset(spec, np.random.default_rng(9))
    for x, y in zip(a, b):
        assert x.id == y.id and x.elements == y.elements
        np.testing.assert_array_equal(x.cart, y.cart)


def test_synth_respects_atom_cap():
    spec = SynthSpec(count=10, backbone_max=8, branch_prob=0.6, max_atoms=30)
    assert all(s.n_atoms <= 30 for s in synth_dataset(spec, np.random.default_rng(2)))
    with pytest.raises(SynthError):
        synth_dataset(SynthSpec(count=1, backbone_min=8, backbone_max=8, max_atoms=10), np.random.default_rng(0),
                      max_attempts=5)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(backbone_min=3, backbone_max=6).validate()
    with pytest.raises(ValueError):
        SynthSpec(branch_prob=1.5).validate()
    with pytest.raises(ValueError):
        SynthSpec(backbone_palette=("S",)).validate()
    with pytest.raises(ValueError):
        SynthSpec.from_dict({"count": 2, "branch_palette": ["ethyl"]})
    assert SynthSpec.from_dict({"count": 2, "backbone_palette": ["O"]}).backbone_palette == ("O",)


def test_ideal_length_table():
    assert ideal_length("C", "H") == ideal_length("H", "C")
    with pytest.raises(SynthError):
        ideal_length("Xe", "C")


def test_augment_preserves_internal_coordinates(corpus, molecules):
    rng = np.random.default_rng(0)
    for s in list(corpus) + list(molecules):
        ref = internal_coords(s)
        moved = augment(s, rng)
        ic = internal_coords(moved)
        np.testing.assert_allclose(ic.bond_lengths, ref.bond_lengths, atol=1e-9)
        np.testing.assert_allclose(ic.angles, ref.angles, atol=1e-9)
        diff = (ic.dihedrals - ref.dihedrals + 180.0) % 360.0 - 180.0
        assert np.all(np.abs(diff) <= 1e-9)


def test_augment_periodic_contract(corpus):
    rng = np.random.default_rng(1)
    for s in corpus:
        moved = augment(s, rng)
        assert moved.cell.c == s.cell.c
        assert np.all((moved.frac >= 0) & (moved.frac < 1))
        assert np.all((moved.cart[:, :2] > 0) & (moved.cart[:, :2] < 55.0))


def test_augment_molecule_moves():
    mol = synth_dataset(SynthSpec(count=1, periodic=False, backbone_min=3, backbone_max=3, name="m"),
                        np.random.default_rng(0))[0]
    moved = augment(mol, np.random.default_rng(5))
    assert not np.allclose(moved.cart, mol.cart)


def test_identity_quaternion():
    np.testing.assert_array_equal(quaternion_matrix([1.0, 0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(quaternion_matrix([3.0, 0, 0, 0]), np.eye(3), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(q=st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_quaternion_rotation_is_orthonormal(q):
    r = quaternion_matrix(q)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_epoch_length_polymers_only(corpus):
    batches = make_epoch(corpus[:10], None, upsample=30, batch_size=32, rng=np.random.default_rng(0))
    records = [r for _, b in batches for r in b]
    assert len(records) == 300
    assert Counter(r.id for r in records) == {s.id: 30 for s in corpus[:10]}


def test_epoch_joint_composition(corpus, molecules):
    mols = [molecules[k % len(molecules)] for k in range(300)]
    batches = make_epoch(corpus[:10], mols, upsample=30, batch_size=32, rng=np.random.default_rng(1))
    counts = Counter()
    for ds, b in batches:
        kinds = {s.periodic for s in b}
        assert len(kinds) == 1
        assert (ds == POLYMER_DATASET) == kinds.pop()
        counts[ds] += len(b)
    assert counts[POLYMER_DATASET] == 300 and counts[MOLECULE_DATASET] == 300
    assert counts[POLYMER_DATASET] / sum(counts.values()) == 0.5


def test_epoch_shuffle_only_randomness(corpus):
    a = make_epoch(corpus[:5], None, 3, 4, np.random.default_rng(0))
    b = make_epoch(corpus[:5], None, 3, 4, np.random.default_rng(1))
    assert sorted(r.id for _, x in a for r in x) == sorted(r.id for _, x in b for r in x)


def test_reference_split_sizes():
    ids = [f"p{k}" for k in range(3855)]
    splits = assign_splits(ids, np.random.default_rng(0))
    assert [len(splits[k]) for k in ("train", "val", "test")] == [3084, 386, 385]
    assert sorted(splits["train"] + splits["val"] + splits["test"]) == sorted(ids)


def test_proportional_split():
    splits = assign_splits([str(k) for k in range(20)], np.random.default_rng(0))
    assert sum(len(v) for v in splits.values()) == 20
    assert len(splits["train"]) == 16


def test_manifest_round_trip(tmp_path, corpus):
    m = write_dataset(corpus[:6], tmp_path / "ds", "synthetic", True, np.random.default_rng(0))
    loaded = DatasetManifest.load(tmp_path / "ds" / "manifest.json")
    assert loaded.to_dict() == m.to_dict()
    back = loaded.load_all()
    assert [s.id for s in back] == [s.id for s in corpus[:6]]
    for a, b in zip(back, corpus[:6]):
        np.testing.assert_allclose(a.cart, b.cart, atol=1e-9)
    train = loaded.load_split("train")
    assert {s.id for s in train} == set(m.splits["train"])
    assert json.loads((tmp_path / "ds" / "manifest.json").read_text())["periodic"] is True
