import json

import pytest
import yaml

from chaingen.cli import EXIT_INPUT, EXIT_MISSING, EXIT_OK, OUTPUT_ROOT_ENV, main
from chaingen.diffengine import load_checkpoint

TINY_MODEL = {"latent_dim": 4, "cond_hidden": 8, "cond_dim": 8, "cond_layers": 1, "vae_width": 8, "vae_blocks": 1,
              "vae_heads": 2, "dit_width": 8, "dit_blocks": 1, "dit_heads": 2, "bias_hidden": 4}


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_yaml(root / "spec.yaml", {"count": 6, "backbone_max": 6, "seed": 3})
    assert main(["synthgen", "--spec", str(spec), "--out", str(root / "data")]) == EXIT_OK
    schedule = {"epochs": 2, "batch_size": 4, "upsample": 1, "warmup_steps": 1}
    cfg = write_yaml(root / "run.yaml", {
        "seed": 1, "datasets": [str(root / "data" / "manifest.json")], "model": TINY_MODEL,
        "vae_train": schedule, "dit_train": schedule, "sample": {"steps": 3, "n_per_input": 2},
        "output_dir": str(root / "run"),
    })
    assert main(["train", "--stage", "vae", "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--stage", "dit", "--config", str(cfg)]) == EXIT_OK
    return root


def test_synthgen_writes_records(run):
    lines = (run / "data" / "records.jsonl").read_text().splitlines()
    assert len(lines) == 6
    manifest = json.loads((run / "data" / "manifest.json").read_text())
    assert sum(len(v) for v in manifest["splits"].values()) == 6


def test_synthgen_deterministic(tmp_path):
    spec = write_yaml(tmp_path / "spec.yaml", {"count": 3, "seed": 5})
    assert main(["synthgen", "--spec", str(spec), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["synthgen", "--spec", str(spec), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "records.jsonl").read_bytes() == (tmp_path / "b" / "records.jsonl").read_bytes()


def test_synthgen_invalid_spec(tmp_path, capsys):
    spec = write_yaml(tmp_path / "spec.yaml", {"count": 3, "backbone_min": 3})
    assert main(["synthgen", "--spec", str(spec), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert "error" in capsys.readouterr().err
    spec = write_yaml(tmp_path / "bad.yaml", {"colour": "red"})
    assert main(["synthgen", "--spec", str(spec), "--out", str(tmp_path / "x")]) == EXIT_INPUT


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    spec = write_yaml(tmp_path / "spec.yaml", {"count": 2})
    assert main(["synthgen", "--spec", str(spec), "--out", "rel"]) == EXIT_OK
    assert (tmp_path / "root" / "rel" / "manifest.json").exists()


def test_prepare(run, tmp_path):
    assert main(["prepare", "--records", str(run / "data" / "records.jsonl"), "--out", str(tmp_path / "p"),
                 "--name", "copy"]) == EXIT_OK
    assert json.loads((tmp_path / "p" / "manifest.json").read_text())["name"] == "copy"
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json}\n")
    assert main(["prepare", "--records", str(bad), "--out", str(tmp_path / "q")]) == EXIT_INPUT


def test_train_outputs(run):
    out = run / "run"
    for name in ("config.yaml", "vae.ckpt", "vae_last.ckpt", "vae_curves.csv", "dit.ckpt", "dit_curves.csv"):
        assert (out / name).exists(), name
    arrays, manifest = load_checkpoint(out / "vae.ckpt")
    assert manifest["config"]["model"]["latent_dim"] == 4
    assert manifest["config"]["weights"]["kl"] == 1e-5
    header = (out / "vae_curves.csv").read_text().splitlines()[0]
    assert header == "step,term,value"


def test_dit_without_vae_is_missing_prerequisite(run, tmp_path):
    cfg = yaml.safe_load((run / "run.yaml").read_text())
    cfg["output_dir"] = str(tmp_path / "empty")
    path = write_yaml(tmp_path / "c.yaml", cfg)
    assert main(["train", "--stage", "dit", "--config", str(path)]) == EXIT_MISSING


def test_resume_continues_step_count(run, tmp_path):
    cfg = yaml.safe_load((run / "run.yaml").read_text())
    cfg["output_dir"] = str(tmp_path / "r")
    path = write_yaml(tmp_path / "c.yaml", cfg)
    assert main(["train", "--stage", "vae", "--config", str(path)]) == EXIT_OK
    first = load_checkpoint(tmp_path / "r" / "vae_last.ckpt")[1]["extra"]["step"]
    cfg["vae_train"]["epochs"] = 4
    path = write_yaml(tmp_path / "c.yaml", cfg)
    assert main(["train", "--stage", "vae", "--config", str(path), "--resume"]) == EXIT_OK
    second = load_checkpoint(tmp_path / "r" / "vae_last.ckpt")[1]["extra"]["step"]
    assert second == 2 * first
    rows = (tmp_path / "r" / "vae_curves.csv").read_text().splitlines()[1:]
    steps = sorted({int(r.split(",")[0]) for r in rows if ",total," in r})
    assert steps == list(range(second))


def test_generate_smiles(run, tmp_path):
    out = tmp_path / "g.jsonl"
    assert main(["generate", "--run", str(run / "run"), "--smiles", "[*]CC[*]", "--n", "4", "--out",
                 str(out)]) == EXIT_OK
    lines = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(lines) == 4
    assert all("status" in line and line["T"] == 3 for line in lines)


def test_generate_deterministic(run, tmp_path):
    args = ["generate", "--run", str(run / "run"), "--manifest", str(run / "data" / "manifest.json"), "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == EXIT_OK
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_generate_bad_smiles_recorded(run, tmp_path):
    out = tmp_path / "g.jsonl"
    assert main(["generate", "--run", str(run / "run"), "--smiles", "C1CC", "[*]CC[*]", "--n", "2", "--out",
                 str(out)]) == EXIT_OK
    lines = [json.loads(line) for line in out.read_text().splitlines()]
    assert "error" in lines[0] and len(lines) == 3
    assert main(["generate", "--run", str(run / "run"), "--smiles", "C1CC", "--out", str(out)]) == EXIT_INPUT


def test_generate_missing_checkpoint(tmp_path):
    assert main(["generate", "--run", str(tmp_path), "--smiles", "CC", "--out", str(tmp_path / "g")]) == EXIT_MISSING


def test_evaluate_reference_copies_at_floor(run, tmp_path):
    records = [json.loads(line) for line in (run / "data" / "records.jsonl").read_text().splitlines()]
    gen = tmp_path / "copies.jsonl"
    with open(gen, "w") as fh:
        for rec in records:
            for k in range(3):
                fh.write(json.dumps({"input_id": rec["id"], "index": k, "seed": 0, "T": 1, "status": "success",
                                     "shortest_bond": 1.0, "record": rec}) + "\n")
    out = tmp_path / "eval"
    assert main(["evaluate", "--generations", str(gen), "--reference", str(run / "data" / "manifest.json"),
                 "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["summary"]["success_rate"] == 1.0
    assert report["summary"]["smoothing_epsilon"] == 1e-10
    kls = [r["kl"] for ref in report["references"] for r in ref["per_key"]]
    assert kls and max(kls) <= 1e-6
    assert (out / "success_by_size.csv").exists() and any((out / "histograms").iterdir())
    assert len(report["references"]) == len(records)


def test_evaluate_all_failures(run, tmp_path):
    records = [json.loads(line) for line in (run / "data" / "records.jsonl").read_text().splitlines()]
    gen = tmp_path / "fail.jsonl"
    gen.write_text("".join(json.dumps({"input_id": records[0]["id"], "index": k, "seed": 0, "T": 1,
                                       "status": "short_bond", "shortest_bond": 0.3, "record": None}) + "\n"
                           for k in range(4)))
    out = tmp_path / "eval"
    assert main(["evaluate", "--generations", str(gen), "--reference", str(run / "data" / "manifest.json"),
                 "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "report.json").read_text())["summary"]["success_rate"] == 0.0


def test_evaluate_unmatched_inputs(run, tmp_path):
    gen = tmp_path / "g.jsonl"
    gen.write_text(json.dumps({"input_id": "nope", "index": 0, "seed": 0, "T": 1, "status": "success",
                               "record": None}) + "\n")
    assert main(["evaluate", "--generations", str(gen), "--reference", str(run / "data" / "manifest.json"),
                 "--out", str(tmp_path / "e")]) == EXIT_MISSING
