"""Datasets: manifests, the synthetic chain corpus, augmentation and epoch scheduling."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .chemgraph.graph import AtomNode, BondEdge, BondOrder, MolecularGraph
from .chemgraph.records import load_records, write_records
from .filtering import filter_structure
from .geometry import BOX_XY, Structure, wrap_frac

log = logging.getLogger(__name__)

POLYMER_DATASET = 0
MOLECULE_DATASET = 1
REFERENCE_SPLIT = (3084, 386, 385)
TETRAHEDRAL = math.degrees(math.acos(-1.0 / 3.0))

VALENCE = {"C": 4, "N": 3, "O": 2}
BRANCHES = ("methyl", "hydroxyl", "fluoro")


class SynthError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    name: str
    periodic: bool
    records: list[str]
    splits: dict[str, list[str]] = field(default_factory=dict)
    path: Path | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "periodic": self.periodic, "records": self.records, "splits": self.splits}

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        self.path = path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        m = cls(data["name"], bool(data["periodic"]), list(data["records"]), dict(data.get("splits", {})), path)
        log.info("dataset %s: %s", m.name, {k: len(v) for k, v in m.splits.items()})
        return m

    def load_all(self) -> list[Structure]:
        base = self.path.parent if self.path else Path(".")
        out = []
        for rel in self.records:
            out.extend(load_records(base / rel))
        return out

    def load_split(self, split: str) -> list[Structure]:
        structures = self.load_all()
        if split not in self.splits:
            return structures
        wanted = set(self.splits[split])
        return [s for s in structures if s.id in wanted]


def assign_splits(ids, rng: np.random.Generator, proportions=REFERENCE_SPLIT) -> dict[str, list[str]]:
    """Shuffle ids into train/val/test in the given proportions (exact counts when they sum to len(ids))."""
    ids = list(ids)
    order = rng.permutation(len(ids))
    total = sum(proportions)
    if total == len(ids):
        n_train, n_val = proportions[0], proportions[1]
    else:
        n_train = int(round(len(ids) * proportions[0] / total))
        n_val = int(round(len(ids) * proportions[1] / total))
    shuffled = [ids[k] for k in order]
    return {
        "train": shuffled[:n_train],
        "val": shuffled[n_train:n_train + n_val],
        "test": shuffled[n_train + n_val:],
    }


# ----------------------------------------------------------------------------
# synthetic corpus


@lru_cache(maxsize=None)
def ideal_geometry() -> tuple[dict, dict]:
    text = resources.files("chaingen.data").joinpath("ideal_geometry.csv").read_text()
    rows = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
    lengths, angles = {}, {}
    for r in rows:
        atoms = tuple(r["atoms"].split("-"))
        if r["kind"] == "length":
            lengths[atoms] = lengths[atoms[::-1]] = float(r["value"])
        else:
            angles[atoms] = float(r["value"])
    return lengths, angles


def ideal_length(a: str, b: str) -> float:
    lengths, _ = ideal_geometry()
    try:
        return lengths[(a, b)]
    except KeyError:
        raise SynthError(f"no ideal bond length for {a}-{b}") from None


@dataclass
class SynthSpec:
    count: int = 20
    backbone_min: int = 4
    backbone_max: int = 6
    branch_prob: float = 0.25
    hetero_prob: float = 0.2
    backbone_palette: tuple = ("O", "N")
    branch_palette: tuple = BRANCHES
    max_atoms: int = 30
    periodic: bool = True
    name: str = "synthetic"

    def validate(self) -> "SynthSpec":
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        lo, hi = self.backbone_min, self.backbone_max
        if self.periodic and (lo < 4 or lo % 2 or hi % 2):
            raise ValueError("periodic backbones need even lengths of at least 4 atoms")
        if lo < 1 or hi < lo:
            raise ValueError(f"bad backbone range [{lo}, {hi}]")
        if not 0 <= self.branch_prob <= 1 or not 0 <= self.hetero_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        for el in self.backbone_palette:
            if el not in VALENCE:
                raise ValueError(f"backbone element {el!r} not supported")
        for b in self.branch_palette:
            if b not in BRANCHES:
                raise ValueError(f"branch {b!r} not supported; choose from {BRANCHES}")
        if self.max_atoms < 3:
            raise ValueError("max_atoms too small")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        data = dict(data)
        for key in ("backbone_palette", "branch_palette"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data).validate()


def _unit(v):
    return v / np.linalg.norm(v)


def _perp(u):
    trial = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    return _unit(trial - u * (trial @ u))


def _cone(axis, ref, theta_deg, n):
    """``n`` directions at ``theta`` from ``axis``, 120 deg apart, the first anti to ``ref``."""
    u = _unit(axis)
    v = ref - u * (ref @ u)
    v = -_unit(v) if np.linalg.norm(v) > 1e-8 else _perp(u)
    w = np.cross(u, v)
    th = math.radians(theta_deg)
    out = []
    for k in range(n):
        phi = 2 * math.pi * k / 3
        out.append(math.cos(th) * u + math.sin(th) * (math.cos(phi) * v + math.sin(phi) * w))
    return out


def _free_directions(known, n_missing, rng):
    """Unit vectors completing an ideal tetrahedron around an atom with ``known`` bond directions."""
    if n_missing == 0:
        return []
    if len(known) == 1:
        return _cone(-known[0], _perp(known[0]), TETRAHEDRAL, 3)[:n_missing]
    if len(known) == 2:
        a, b = _unit(known[0]), _unit(known[1])
        w = -_unit(a + b)
        n = _unit(np.cross(a, b))
        half = math.radians(TETRAHEDRAL / 2)
        pair = [w * math.cos(half) + n * math.sin(half), w * math.cos(half) - n * math.sin(half)]
        if n_missing == 1:
            return [pair[int(rng.integers(2))]]
        return pair
    if len(known) == 3:
        return [-_unit(sum(known))]
    raise SynthError("unsupported coordination")


class _Builder:
    def __init__(self):
        self.elements: list[str] = []
        self.pos: list[np.ndarray] = []
        self.bonds: list[BondEdge] = []

    def add(self, el, p):
        self.elements.append(el)
        self.pos.append(np.asarray(p, dtype=np.float64))
        return len(self.elements) - 1

    def bond(self, i, j, shift=0):
        self.bonds.append(BondEdge(i, j, BondOrder.SINGLE, shift))

    def substituent(self, parent, direction, kind, rng):
        pel = self.elements[parent]
        if kind == "H":
            self.bond(parent, self.add("H", self.pos[parent] + ideal_length(pel, "H") * direction))
            return
        if kind == "fluoro":
            self.bond(parent, self.add("F", self.pos[parent] + ideal_length(pel, "F") * direction))
            return
        heavy = "C" if kind == "methyl" else "O"
        c = self.add(heavy, self.pos[parent] + ideal_length(pel, heavy) * direction)
        self.bond(parent, c)
        n_h = 3 if kind == "methyl" else 1
        # staggered hydrogens: the first sits anti to one of the parent's other bonds
        ref = -direction if len(self.pos) < 3 else self._any_neighbour_dir(parent, exclude=c)
        for d in _cone(-direction, ref, TETRAHEDRAL, 3)[:n_h]:
            self.bond(c, self.add("H", self.pos[c] + ideal_length(heavy, "H") * d))

    def _any_neighbour_dir(self, atom, exclude):
        for b in self.bonds:
            other = b.j if b.i == atom else b.i if b.j == atom else None
            if other is not None and other != exclude and b.z_shift == 0:
                return self.pos[other] - self.pos[atom]
        return _perp(np.array([0.0, 0.0, 1.0]))

    def graph(self, periodic):
        return MolecularGraph(
            tuple(AtomNode(k, e) for k, e in enumerate(self.elements)), tuple(self.bonds), periodic
        )


def _pick_backbone(spec: SynthSpec, rng) -> list[str]:
    n = int(rng.choice(np.arange(spec.backbone_min, spec.backbone_max + 1, 2 if spec.periodic else 1)))
    backbone = ["C"] * n
    for k in range(1, n):
        if spec.backbone_palette and rng.random() < spec.hetero_prob:
            left = backbone[k - 1]
            right = backbone[(k + 1) % n] if (spec.periodic or k + 1 < n) else "C"
            if left == "C" and right == "C":
                backbone[k] = str(rng.choice(list(spec.backbone_palette)))
    if not spec.periodic and backbone[-1] != "C":
        backbone[-1] = "C"
    return backbone


def _zigzag(backbone, periodic):
    """Planar zigzag positions in the x-z plane; periodic chains are rotated onto the z axis."""
    n = len(backbone)
    n_bonds = n if periodic else n - 1
    turn = math.pi - math.radians(TETRAHEDRAL)
    pts = [np.zeros(3)]
    phi = 0.0
    vecs = []
    for k in range(n_bonds):
        length = ideal_length(backbone[k], backbone[(k + 1) % n])
        vec = length * np.array([math.sin(phi), 0.0, math.cos(phi)])
        vecs.append(vec)
        if k + 1 < n:
            pts.append(pts[-1] + vec)
        phi += turn if k % 2 == 0 else -turn
    pts = np.array(pts)
    if not periodic:
        return pts, None
    total = np.sum(vecs, axis=0)
    # rotate in the x-z plane so the repeat translation lies along +z
    ang = math.atan2(total[0], total[2])
    c, s = math.cos(ang), math.sin(ang)
    rot = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    return pts @ rot.T, float(np.linalg.norm(total))


def _build_one(spec: SynthSpec, rng, index: int) -> Structure:
    backbone = _pick_backbone(spec, rng)
    pts, bz = _zigzag(backbone, spec.periodic)
    n = len(backbone)
    b = _Builder()
    for el, p in zip(backbone, pts):
        b.add(el, p)
    for k in range(n - 1):
        b.bond(k, k + 1)
    if spec.periodic:
        b.bond(n - 1, 0, 1)
    lift = np.array([0.0, 0.0, bz]) if spec.periodic else None
    for k, el in enumerate(backbone):
        known = []
        if k > 0:
            known.append(pts[k - 1] - pts[k])
        elif spec.periodic:
            known.append(pts[n - 1] - lift - pts[k])
        if k + 1 < n:
            known.append(pts[k + 1] - pts[k])
        elif spec.periodic:
            known.append(pts[0] + lift - pts[k])
        known = [_unit(v) for v in known]
        for d in _free_directions(known, VALENCE[el] - len(known), rng):
            kind = "H"
            if el == "C" and spec.branch_palette and rng.random() < spec.branch_prob:
                kind = str(rng.choice(list(spec.branch_palette)))
            b.substituent(k, d, kind, rng)
    graph = b.graph(spec.periodic)
    cart = np.array(b.pos)
    # random orientation about the chain axis, centred in the box
    theta = rng.uniform(0, 2 * math.pi)
    if spec.periodic:
        rot = _rot_z(theta)
        cart = cart @ rot.T
        cart[:, :2] += BOX_XY / 2 - cart[:, :2].mean(axis=0)
        cart[:, 2] += rng.uniform(0, bz)
        return Structure.from_cart(graph, cart, bz, id=f"{spec.name}-{index:05d}")
    cart = cart - cart.mean(axis=0)
    cart = cart @ _random_rotation(rng).T
    return Structure.from_cart(graph, cart, None, id=f"{spec.name}-{index:05d}")


def synth_dataset(spec: SynthSpec, rng: np.random.Generator, max_attempts: int = 100) -> list[Structure]:
    """Idealised chains (or capped molecules) that pass the generation filter against their own graphs."""
    spec.validate()
    out = []
    for index in range(spec.count):
        for _ in range(max_attempts):
            s = _build_one(spec, rng, index)
            if s.n_atoms > spec.max_atoms:
                continue
            if filter_structure(s, s.graph).success:
                out.append(s)
                break
        else:
            raise SynthError(f"record {index}: no clash-free structure within {max_attempts} attempts")
    return out


# ----------------------------------------------------------------------------
# augmentation


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quaternion_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _random_rotation(rng) -> np.ndarray:
    # a normalised 4D Gaussian is uniform on the unit quaternion sphere
    return quaternion_matrix(rng.standard_normal(4))


def augment(s: Structure, rng: np.random.Generator, translate_scale: float = 1.0) -> Structure:
    """Random rigid motion that keeps the cell contract.

    Periodic chains rotate about z only, move in x/y inside the box and shift
    along z (wrapped); molecules get a uniform 3D rotation plus a Gaussian
    translation of ``translate_scale`` Angstrom.
    """
    if not s.periodic:
        centre = s.cart.mean(axis=0)
        cart = (s.cart - centre) @ _random_rotation(rng).T + centre
        cart = cart + translate_scale * rng.standard_normal(3)
        return Structure(s.graph, cart, None, None, s.id, dict(s.meta))
    bz = s.cell.c
    frac = s.frac.copy()
    xy = frac[:, :2] * BOX_XY
    centre = xy.mean(axis=0)
    rel = (xy - centre) @ _rot_z(rng.uniform(0, 2 * math.pi))[:2, :2].T
    reach = float(np.max(np.linalg.norm(rel, axis=1), initial=0.0)) + 1.0
    new_centre = rng.uniform(reach, BOX_XY - reach, size=2) if reach < BOX_XY / 2 else np.full(2, BOX_XY / 2)
    frac[:, :2] = (rel + new_centre) / BOX_XY
    frac[:, 2] += rng.uniform(0.0, 1.0)
    return Structure.from_frac(s.graph, wrap_frac(frac), bz, s.id)


# ----------------------------------------------------------------------------
# epochs


def make_epoch(polymers, molecules=None, upsample: int = 30, batch_size: int = 32,
               rng: np.random.Generator | None = None) -> list[tuple[int, list]]:
    """Batches for one epoch as ``(dataset_id, records)`` pairs.

    Every polymer appears ``upsample`` times; molecules appear once.  Each
    batch holds records of one dataset, and batch order is shuffled.
    """
    rng = rng if rng is not None else np.random.default_rng()
    pools = [(POLYMER_DATASET, [p for p in polymers for _ in range(upsample)])]
    if molecules:
        pools.append((MOLECULE_DATASET, list(molecules)))
    batches = []
    for ds, pool in pools:
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), batch_size):
            batches.append((ds, [pool[k] for k in order[start:start + batch_size]]))
    return [batches[k] for k in rng.permutation(len(batches))]


def write_dataset(structures, out_dir, name: str, periodic: bool, rng: np.random.Generator,
                  proportions=REFERENCE_SPLIT) -> DatasetManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_records(out_dir / "records.jsonl", structures)
    manifest = DatasetManifest(name, periodic, ["records.jsonl"],
                               assign_splits([s.id for s in structures], rng, proportions))
    manifest.save(out_dir / "manifest.json")
    return manifest
