"""Distribution-matching evaluation of generated ensembles.

Bond lengths, angles and dihedrals are grouped by the element tuple of the
atoms involved and bucketed into fixed-range histograms; each group is scored
by the forward KL divergence from the reference histogram to the generated
one.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import internal_coords

RANGES = {"bond": (0.9, 2.0), "angle": (0.0, 180.0), "dihedral": (0.0, 360.0)}
KINDS = tuple(RANGES)
N_BUCKETS = 1000
EPSILON = 1e-10


@dataclass(frozen=True)
class Histogram:
    kind: str
    lo: float
    hi: float
    mass: np.ndarray        # probability per bucket, sums to 1
    counts: np.ndarray      # raw counts after clamping
    out_of_range: int
    epsilon: float

    @property
    def n_buckets(self) -> int:
        return len(self.mass)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_buckets

    @property
    def n_values(self) -> int:
        return int(self.counts.sum())

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_buckets + 1)


def build_histogram(values, kind: str, epsilon: float = EPSILON, n_buckets: int = N_BUCKETS) -> Histogram:
    """Bucket ``values`` over the fixed range of ``kind`` with additive smoothing.

    Values outside the range land in the edge buckets and are counted in
    ``out_of_range``.  Masses are ``(p + eps) / (1 + n_buckets * eps)`` with
    ``p`` the empirical bucket frequencies.
    """
    if kind not in RANGES:
        raise ValueError(f"unknown histogram kind {kind!r}; expected one of {KINDS}")
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError(f"no values to histogram for {kind}")
    lo, hi = RANGES[kind]
    width = (hi - lo) / n_buckets
    outside = int(np.sum((v < lo) | (v > hi)))
    idx = np.clip(np.floor((v - lo) / width).astype(np.int64), 0, n_buckets - 1)
    counts = np.bincount(idx, minlength=n_buckets)
    p = counts / v.size
    mass = (p + epsilon) / (1.0 + n_buckets * epsilon)
    return Histogram(kind, lo, hi, mass, counts, outside, epsilon)


def forward_kl(ref: Histogram, pred: Histogram) -> float:
    """``sum_b ref_b ln(ref_b / pred_b)`` over buckets where the reference has mass."""
    if ref.kind != pred.kind or ref.n_buckets != pred.n_buckets or (ref.lo, ref.hi) != (pred.lo, pred.hi):
        raise ValueError(f"histograms differ: {ref.kind}[{ref.n_buckets}] vs {pred.kind}[{pred.n_buckets}]")
    r, q = ref.mass, pred.mass
    keep = r > 0
    return float(np.sum(r[keep] * (np.log(r[keep]) - np.log(q[keep]))))


def canonical_key(elements) -> str:
    """Element tuple read in whichever direction sorts first, joined with '-'."""
    t = tuple(elements)
    return "-".join(min(t, t[::-1]))


def typed_values(structure) -> dict[str, dict[str, list[float]]]:
    """Internal coordinates of ``structure`` grouped by kind and canonical element key (degrees for angles)."""
    ic = internal_coords(structure)
    el = structure.elements
    out: dict[str, dict[str, list[float]]] = {k: defaultdict(list) for k in KINDS}
    for kind, index, values in (
        ("bond", ic.index.bonds[:, :2], ic.bond_lengths),
        ("angle", ic.index.angles, ic.angles),
        ("dihedral", ic.index.dihedrals, ic.dihedrals),
    ):
        for row, value in zip(index, values):
            if np.isfinite(value):
                out[kind][canonical_key(el[a] for a in row)].append(float(value))
    return out


@dataclass
class KeyResult:
    kind: str
    key: str
    kl: float
    ref: Histogram
    pred: Histogram

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "key": self.key, "kl": self.kl,
            "n_ref": self.ref.n_values, "n_pred": self.pred.n_values,
            "out_of_range_ref": self.ref.out_of_range, "out_of_range_pred": self.pred.out_of_range,
        }


@dataclass
class DistributionReport:
    reference_id: str
    n_generated: int
    n_success: int
    epsilon: float
    results: list[KeyResult] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return self.n_success / self.n_generated if self.n_generated else 0.0

    def kl(self, kind: str) -> dict[str, float]:
        return {r.key: r.kl for r in self.results if r.kind == kind}

    def mean_kl(self, kind: str) -> float | None:
        """Mean over element keys of one kind (None when there are no keys)."""
        vals = list(self.kl(kind).values())
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "reference_id": self.reference_id,
            "n_generated": self.n_generated,
            "n_success": self.n_success,
            "success_rate": self.success_rate,
            "smoothing_epsilon": self.epsilon,
            "kl_aggregation": "mean over element keys",
            "mean_kl": {k: self.mean_kl(k) for k in KINDS},
            "per_key": [r.to_dict() for r in sorted(self.results, key=lambda r: (r.kind, r.key))],
        }


def evaluate_ensemble(reference, generated, reports, epsilon: float = EPSILON) -> DistributionReport:
    """Score the successful members of ``generated`` against one reference structure.

    ``reports`` are the filter outcomes aligned with ``generated``.
    """
    generated, reports = list(generated), list(reports)
    if len(generated) != len(reports):
        raise ValueError("generated structures and filter reports must align")
    good = [s for s, r in zip(generated, reports) if r is not None and r.success and s is not None]
    report = DistributionReport(reference.id, len(generated), len(good), epsilon)
    if not good:
        return report
    ref_vals = typed_values(reference)
    pooled: dict[str, dict[str, list[float]]] = {k: defaultdict(list) for k in KINDS}
    for s in good:
        for kind, groups in typed_values(s).items():
            for key, vals in groups.items():
                pooled[kind][key].extend(vals)
    for kind in KINDS:
        for key in sorted(ref_vals[kind]):
            if not pooled[kind].get(key):
                continue
            ref_h = build_histogram(ref_vals[kind][key], kind, epsilon)
            pred_h = build_histogram(pooled[kind][key], kind, epsilon)
            report.results.append(KeyResult(kind, key, forward_kl(ref_h, pred_h), ref_h, pred_h))
    return report


def zheight_agreement(pairs) -> dict:
    """Coefficient of determination of predicted against reference cell heights."""
    arr = np.asarray(list(pairs), dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        raise ValueError("need at least two (predicted, reference) pairs")
    pred, ref = arr[:, 0], arr[:, 1]
    ss_tot = float(np.sum((ref - ref.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("reference heights are constant; r^2 is undefined")
    resid = ref - pred
    return {"r2": 1.0 - float(np.sum(resid ** 2)) / ss_tot, "residuals": resid.tolist()}


def success_by_size(items, bin_width: int = 10) -> list[dict]:
    """Success fraction per atom-count bin ``[lo, lo + bin_width)``; empty bins are omitted.

    ``items`` are ``(n_atoms, success)`` pairs.
    """
    if bin_width < 1:
        raise ValueError("bin_width must be positive")
    tally: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for n_atoms, ok in items:
        lo = (int(n_atoms) // bin_width) * bin_width
        tally[lo][0] += 1
        tally[lo][1] += bool(ok)
    return [
        {"lo": lo, "hi": lo + bin_width, "n": n, "successes": s, "rate": s / n}
        for lo, (n, s) in sorted(tally.items())
    ]


def write_success_by_size(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lo", "hi", "n", "successes", "rate"])
        w.writeheader()
        w.writerows(rows)


def write_histograms(report: DistributionReport, out_dir) -> list[Path]:
    """One CSV per (kind, key) with bucket edges and both mass columns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in report.results:
        safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in r.key)
        path = out_dir / f"{report.reference_id or 'ref'}_{r.kind}_{safe}.csv"
        edges = r.ref.edges()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lo", "hi", "ref_mass", "pred_mass"])
            for b in range(r.ref.n_buckets):
                w.writerow([repr(float(edges[b])), repr(float(edges[b + 1])),
                            repr(float(r.ref.mass[b])), repr(float(r.pred.mass[b]))])
        paths.append(path)
    return paths


def summarize(reports) -> dict:
    """Corpus-level aggregates: success rate pooled over generations, KL means over references."""
    reports = list(reports)
    n_gen = sum(r.n_generated for r in reports)
    n_ok = sum(r.n_success for r in reports)
    out = {"n_references": len(reports), "n_generated": n_gen, "n_success": n_ok,
           "success_rate": n_ok / n_gen if n_gen else 0.0,
           "mean_success_rate": float(np.mean([r.success_rate for r in reports])) if reports else 0.0,
           "smoothing_epsilon": reports[0].epsilon if reports else EPSILON}
    for kind in KINDS:
        vals = [r.mean_kl(kind) for r in reports if r.mean_kl(kind) is not None]
        out[f"mean_{kind}_kl"] = float(np.mean(vals)) if vals else None
    return out


def write_report(payload: dict, path) -> None:
    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items()}
        if isinstance(x, list):
            return [clean(v) for v in x]
        return x
    Path(path).write_text(json.dumps(clean(payload), indent=2, sort_keys=True) + "\n")
