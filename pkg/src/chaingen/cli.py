"""Command line: synthgen, prepare, train, generate, evaluate.

Exit codes: 0 success, 2 input error, 3 missing prerequisite, 4 numerical failure.
Relative output paths are resolved under ``$CHAINGEN_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch
import yaml

from .chemgraph.records import RecordError, load_records, parse_record, record_dict
from .chemgraph.smiles import SmilesError, parse_smiles
from .config import RunConfig
from .datapipe import DatasetManifest, SynthError, SynthSpec, synth_dataset, write_dataset
from .diffengine import Adam, load_checkpoint, load_module_arrays, module_arrays, named_parameters, save_checkpoint
from .evalkit import (evaluate_ensemble, success_by_size, summarize, write_histograms, write_report,
                      write_success_by_size)
from .filtering import GenReport, GenStatus, filter_structure
from .flowdit import FlowDenoiser, sample, train_dit
from .vae import LatentAutoencoder, TrainingDiverged, train_vae

log = logging.getLogger("chaingen")

OUTPUT_ROOT_ENV = "CHAINGEN_OUTPUT_ROOT"
EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def output_path(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _read_mapping(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise CliError(f"{path}: not valid YAML/JSON: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError(f"{path}: expected a mapping at top level")
    return data


# ----------------------------------------------------------------------------
# synthgen / prepare


def cmd_synthgen(args) -> int:
    data = _read_mapping(args.spec)
    seed = int(data.pop("seed", args.seed))
    try:
        spec = SynthSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}") from exc
    try:
        structures = synth_dataset(spec, np.random.default_rng(seed))
    except SynthError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    out = output_path(args.out)
    manifest = write_dataset(structures, out, spec.name, spec.periodic, np.random.default_rng([seed, 1]))
    print(f"wrote {len(structures)} records to {out} ({', '.join(f'{k}={len(v)}' for k, v in manifest.splits.items())})")
    return EXIT_OK


def cmd_prepare(args) -> int:
    """Validate a JSON-lines record file (e.g. pre-converted molecules) and write a manifest for it."""
    src = Path(args.records)
    try:
        structures = load_records(src)
    except (OSError, RecordError, ValueError) as exc:
        raise CliError(f"cannot load {src}: {exc}") from exc
    if not structures:
        raise CliError(f"{src} holds no records")
    periodic = {s.periodic for s in structures}
    if len(periodic) != 1:
        raise CliError(f"{src} mixes periodic and non-periodic records")
    name = args.name or src.stem
    manifest = write_dataset(structures, output_path(args.out), name, periodic.pop(),
                             np.random.default_rng(args.seed))
    print(f"prepared {name}: {', '.join(f'{k}={len(v)}' for k, v in manifest.splits.items())}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# train


def _load_config(args) -> RunConfig:
    try:
        cfg = RunConfig.from_dict(_read_mapping(args.config)) if args.config else RunConfig()
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _datasets(cfg: RunConfig):
    if not cfg.datasets:
        raise CliError("config lists no dataset manifests")
    sets = []
    for path in cfg.datasets:
        try:
            sets.append(DatasetManifest.load(path))
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot load manifest {path}: {exc}") from exc
    polymers = sets[0]
    molecules = sets[1] if len(sets) > 1 else None
    train = polymers.load_split("train")
    val = polymers.load_split("val") or None
    mols = molecules.load_split("train") if molecules else None
    return train, val, mols


def _resume_state(path, module, cfg_hash, opt):
    arrays, manifest = load_checkpoint(path)
    if manifest["config_hash"] != cfg_hash:
        log.warning("resuming from %s written with a different config (hash %s, now %s)",
                    path, manifest["config_hash"], cfg_hash)
    load_module_arrays(module, {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    opt.load_state_arrays(arrays)
    return int(manifest["extra"].get("step", 0))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = output_path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = cfg.to_dict()
    cfg_hash = cfg.hash()
    (out / "config.yaml").write_text(yaml.safe_dump(cfg_dict, sort_keys=True))
    torch.manual_seed(cfg.seed)
    if args.stage == "vae":
        train, val, mols = _datasets(cfg)
        model = LatentAutoencoder(cfg.model)
        tcfg, stem = cfg.vae_train, "vae"
    else:
        vae_path = out / "vae.ckpt"
        if not vae_path.exists():
            raise CliError(f"denoiser training needs an autoencoder checkpoint at {vae_path}", EXIT_MISSING)
        train, val, mols = _datasets(cfg)
        vae_arrays, vae_manifest = load_checkpoint(vae_path)
        if vae_manifest["config_hash"] != cfg_hash:
            log.warning("autoencoder checkpoint was written with config hash %s, now %s",
                        vae_manifest["config_hash"], cfg_hash)
        vae = LatentAutoencoder(cfg.model)
        load_module_arrays(vae, vae_arrays)
        model = FlowDenoiser(cfg.model)
        model.conditioner.load_state_dict(vae.conditioner.state_dict())
        tcfg, stem = cfg.dit_train, "dit"
    opt = Adam(named_parameters([("", model)]), lr=tcfg.lr, clip_norm=tcfg.clip_norm)
    start = 0
    last = out / f"{stem}_last.ckpt"
    if args.resume and last.exists():
        start = _resume_state(last, model, cfg_hash, opt)
        log.info("resuming %s training at step %d", stem, start)
    try:
        if stem == "vae":
            result = train_vae(model, train, cfg.weights, tcfg, cfg.seed, mols, val, start, opt)
        else:
            result = train_dit(model, vae, train, tcfg, cfg.seed, mols, val, start, opt, fit_scale=start == 0)
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from exc
    extra = {"kind": stem, "step": result.steps, "best_step": result.best_step, "best_val": result.best_val}
    last_arrays = {f"model/{k}": v for k, v in module_arrays(model).items()}
    last_arrays.update(opt.state_arrays())
    save_checkpoint(last, last_arrays, cfg_dict, extra)
    save_checkpoint(out / f"{stem}.ckpt", result.best_state, cfg_dict, extra)
    curves = out / f"{stem}_curves.csv"
    _write_curves(curves, result.history, append=bool(start) and curves.exists())
    print(f"{stem}: {result.steps} steps, best validation {result.best_val:.6g} at step {result.best_step}")
    return EXIT_OK


def _write_curves(path, history, append: bool) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(["step", "term", "value"])
        for step, term, value in history:
            w.writerow([step, term, repr(float(value))])


# ----------------------------------------------------------------------------
# generate


def _load_models(run_dir: Path):
    vae_path, dit_path = run_dir / "vae.ckpt", run_dir / "dit.ckpt"
    for p in (vae_path, dit_path):
        if not p.exists():
            raise CliError(f"missing checkpoint {p}", EXIT_MISSING)
    vae_arrays, vae_manifest = load_checkpoint(vae_path)
    dit_arrays, dit_manifest = load_checkpoint(dit_path)
    if vae_manifest["config"].get("model") != dit_manifest["config"].get("model"):
        raise CliError("autoencoder and denoiser checkpoints disagree on the model config", EXIT_INPUT)
    run_cfg = RunConfig.from_dict(dit_manifest["config"])
    vae = LatentAutoencoder(run_cfg.model)
    load_module_arrays(vae, vae_arrays)
    dit = FlowDenoiser(run_cfg.model)
    load_module_arrays(dit, dit_arrays)
    return vae, dit, run_cfg


def _generation_inputs(args):
    """List of ``(input_id, graph or None, error)``."""
    inputs = []
    for text in args.smiles or []:
        try:
            inputs.append((text, parse_smiles(text), None))
        except SmilesError as exc:
            inputs.append((text, None, str(exc)))
    if args.manifest:
        try:
            manifest = DatasetManifest.load(args.manifest)
            structures = manifest.load_split(args.split) if args.split else manifest.load_all()
        except (OSError, RecordError, KeyError, ValueError) as exc:
            raise CliError(f"cannot load {args.manifest}: {exc}") from exc
        inputs += [(s.id, s.graph, None) for s in structures]
    if not inputs:
        raise CliError("nothing to generate: pass --smiles or --manifest")
    return inputs


def cmd_generate(args) -> int:
    run_dir = output_path(args.run)
    vae, dit, run_cfg = _load_models(run_dir)
    steps = args.steps if args.steps is not None else run_cfg.sample.steps
    n = args.n if args.n is not None else run_cfg.sample.n_per_input
    if steps < 1 or n < 1:
        raise CliError("--steps and --n must be positive")
    inputs = _generation_inputs(args)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines, any_ok = [], False
    for index, (input_id, graph, error) in enumerate(inputs):
        if graph is None:
            lines.append({"input_id": input_id, "seed": args.seed, "T": steps, "error": error})
            continue
        any_ok = True
        for k, gen in enumerate(sample(graph, steps, args.seed, dit, vae, n, input_index=index)):
            line = {"input_id": input_id, "index": k, "seed": gen.seed, "T": steps}
            if gen.structure is None:
                line.update(status=GenStatus.NONFINITE.value, failed_step=gen.failed_step, record=None)
            else:
                rep = filter_structure(gen.structure, graph)
                s = gen.structure
                line.update(rep.to_dict())
                line["record"] = record_dict(type(s)(s.graph, s.cart, s.frac, s.cell, f"{input_id}#{k}"))
            lines.append(line)
    with open(out, "w") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True, separators=(",", ":")) + "\n")
    n_ok = sum(1 for l in lines if l.get("status") == "success")
    n_gen = sum(1 for l in lines if "status" in l)
    print(f"wrote {n_gen} generations ({n_ok} pass the filter) to {out}")
    return EXIT_OK if any_ok else EXIT_INPUT


# ----------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    gen_path = Path(args.generations)
    try:
        lines = [json.loads(l) for l in gen_path.read_text().splitlines() if l.strip()]
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read {gen_path}: {exc}") from exc
    try:
        references = {s.id: s for s in DatasetManifest.load(args.reference).load_all()}
    except (OSError, RecordError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load references {args.reference}: {exc}") from exc
    groups = defaultdict(list)
    for line in lines:
        if "status" in line:
            groups[line["input_id"]].append(line)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports, size_items, missing = [], [], []
    for input_id in sorted(groups):
        ref = references.get(input_id)
        if ref is None:
            missing.append(input_id)
            continue
        structures, statuses = [], []
        for line in groups[input_id]:
            rec = line.get("record")
            s = parse_record(rec)[1] if rec else None
            s = s.with_graph(ref.graph) if s is not None and s.n_atoms == ref.n_atoms else s
            status = GenStatus(line["status"])
            structures.append(s)
            statuses.append(GenReport(status, line.get("shortest_bond") or float("nan"), None))
            size_items.append((ref.n_atoms, status is GenStatus.SUCCESS))
        rep = evaluate_ensemble(ref, structures, statuses, args.epsilon)
        reports.append(rep)
        write_histograms(rep, out / "histograms")
    if missing:
        log.warning("no reference for inputs %s", missing)
    if not reports:
        raise CliError("no generation input could be matched to a reference", EXIT_MISSING)
    payload = {"summary": summarize(reports), "references": [r.to_dict() for r in reports],
               "unmatched_inputs": missing}
    write_report(payload, out / "report.json")
    write_success_by_size(success_by_size(size_items, args.bin_width), out / "success_by_size.csv")
    s = payload["summary"]
    print(f"success rate {s['success_rate']:.3f}; mean bond KL {s['mean_bond_kl']}; report in {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chaingen", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthgen", help="build the synthetic chain corpus")
    s.add_argument("--spec", required=True, help="YAML/JSON with SynthSpec fields (and optional seed)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthgen)

    s = sub.add_parser("prepare", help="validate a record file and write its manifest")
    s.add_argument("--records", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--name")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train the autoencoder or the denoiser")
    s.add_argument("--stage", choices=("vae", "dit"), required=True)
    s.add_argument("--config", help="run config (YAML); defaults fill missing keys")
    s.add_argument("--out", help="run directory (overrides output_dir)")
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", action="store_true", help="continue from <stage>_last.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("generate", help="sample structures for SMILES or a dataset")
    s.add_argument("--run", required=True, help="run directory holding vae.ckpt and dit.ckpt")
    s.add_argument("--smiles", nargs="*")
    s.add_argument("--manifest")
    s.add_argument("--split")
    s.add_argument("--n", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="score a generation manifest against references")
    s.add_argument("--generations", required=True)
    s.add_argument("--reference", required=True, help="dataset manifest holding the references")
    s.add_argument("--out", required=True)
    s.add_argument("--epsilon", type=float, default=1e-10)
    s.add_argument("--bin-width", type=int, default=10)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
