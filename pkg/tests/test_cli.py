"""Command-line interface: happy paths, exit codes, manifests and idempotency."""
import json
from pathlib import Path

import numpy as np
import pytest

from agedit.cli import COMMANDS, run
from agedit.io import load_tensor, read_json, read_pgm, sha256_file
from agedit.synthface import SyntheticFaceSpec

TINY = {"d_model": 16, "n_blocks": 1, "batch_size": 8, "stage1_steps": 6, "stage2_steps": 4,
        "acg_warmup_steps": 3, "sample_steps": 5}


def _outputs(out: Path) -> dict:
    man = read_json(out / "run_manifest.json")
    for entry in man["outputs"]:
        assert sha256_file(out / entry["path"]) == entry["sha256"]
        assert (out / entry["path"]).resolve().is_relative_to(out.resolve())
    return {e["path"]: e["sha256"] for e in man["outputs"]}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--n", "1000", "--seed", "7", "--out", str(root / "data")]) == 0
    assert run(["build-codebook", "--data", str(root / "data"), "--out", str(root / "cb")]) == 0
    assert run(["train-probe", "--data", str(root / "data"), "--steps", "150", "--out", str(root / "probe")]) == 0
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert run(["train", "--data", str(root / "data"), "--config", str(root / "cfg.json"),
                "--codebook", str(root / "cb" / "codebook.json"), "--probe", str(root / "probe" / "probe.ckpt"),
                "--out", str(root / "train")]) == 0
    spec = SyntheticFaceSpec(np.linspace(-0.5, 0.5, 8), 35, 3)
    (root / "spec.json").write_text(json.dumps(spec.to_json()))
    return root


def test_gen_data_and_manifest(workspace):
    out = workspace / "data"
    files = _outputs(out)
    assert "manifest.json" in files and "images.agt" in files
    man = read_json(out / "run_manifest.json")
    assert man["command"] == "gen-data" and man["seed"] == 7 and man["dataset_manifest_hash"]
    assert load_tensor(out / "images.agt").shape == (1000, 1, 16, 16)


def test_gen_data_is_idempotent(workspace, tmp_path):
    assert run(["gen-data", "--n", "1000", "--seed", "7", "--out", str(tmp_path / "again")]) == 0
    assert _outputs(tmp_path / "again") == _outputs(workspace / "data")


def test_codebook_and_probe_outputs(workspace):
    assert set(_outputs(workspace / "cb")) == {"codebook.json", "purity.json"}
    assert set(read_json(workspace / "cb" / "purity.json")["similarity"]) == {"0", "1", "2", "3"}
    assert set(_outputs(workspace / "probe")) == {"probe.ckpt"}


def test_train_outputs_and_idempotency(workspace, tmp_path):
    files = _outputs(workspace / "train")
    assert set(files) == {"config.json", "loss.log", "checkpoint.ckpt"}
    lines = (workspace / "train" / "loss.log").read_text().splitlines()
    assert len(lines) == 1 + 10
    assert run(["train", "--data", str(workspace / "data"), "--config", str(workspace / "cfg.json"),
                "--codebook", str(workspace / "cb" / "codebook.json"),
                "--probe", str(workspace / "probe" / "probe.ckpt"), "--out", str(tmp_path / "t2")]) == 0
    assert _outputs(tmp_path / "t2") == files


def test_train_stage_two_from_init(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "cfg.json"),
            "--probe", str(workspace / "probe" / "probe.ckpt")]
    assert run(args + ["--stage", "II", "--out", str(tmp_path / "a")]) == 2
    assert run(args + ["--stage", "II", "--init", str(workspace / "train" / "checkpoint.ckpt"),
                       "--out", str(tmp_path / "b")]) == 0


def test_edit_with_scales(workspace, tmp_path):
    ckpt = str(workspace / "train" / "checkpoint.ckpt")
    base = ["edit", "--checkpoint", ckpt, "--source", str(workspace / "spec.json"), "--target-age", "80",
            "--steps", "5"]
    assert run(base + ["--age-scale", "1.5", "--out", str(tmp_path / "e1")]) == 0
    assert set(_outputs(tmp_path / "e1")) == {"edited.pgm", "edited.agt"}
    assert read_pgm(tmp_path / "e1" / "edited.pgm").shape == (16, 16)
    assert run(base + ["--age-scale", "1.5", "--out", str(tmp_path / "e2")]) == 0
    assert _outputs(tmp_path / "e1") == _outputs(tmp_path / "e2")
    # an image source goes through the identity encoder
    assert run(["edit", "--checkpoint", ckpt, "--source", str(tmp_path / "e1" / "edited.pgm"),
                "--target-age", "20", "--steps", "5", "--out", str(tmp_path / "e3")]) == 0


def test_eval_attn_and_report(workspace, tmp_path):
    ckpt = str(workspace / "train" / "checkpoint.ckpt")
    assert run(["eval", "--checkpoint", ckpt, "--n-test", "3", "--targets", "20", "40", "--steps", "5",
                "--baseline-n", "5", "--out", str(tmp_path / "ev")]) == 0
    metrics = read_json(tmp_path / "ev" / "metrics.json")
    assert metrics["targets"] == [20, 40] and "prior_baseline_mae" in metrics["extra"]
    assert run(["attn-dump", "--checkpoint", ckpt, "--source", str(workspace / "spec.json"),
                "--out", str(tmp_path / "attn")]) == 0
    files = _outputs(tmp_path / "attn")
    assert "region_mass.json" in files and sum(p.startswith("maps/") for p in files) == 4
    assert run(["report", str(tmp_path / "ev" / "metrics.json"), "--out", str(tmp_path / "rep")]) == 0
    assert "avg" in (tmp_path / "rep" / "report.txt").read_text()
    assert run(["report", str(workspace / "cb" / "purity.json"), "--out", str(tmp_path / "rep2")]) == 2


def test_ablate_tiny(workspace, tmp_path):
    assert run(["ablate", "--data", str(workspace / "data"), "--config", str(workspace / "cfg.json"),
                "--probe", str(workspace / "probe" / "probe.ckpt"), "--n-test", "3",
                "--out", str(tmp_path / "abl")]) == 0
    table = read_json(tmp_path / "abl" / "ablation.json")
    assert [r["variant"] for r in table["rows"]] == ["full", "W/O Age", "W/O ID", "W/O ACG"]


def test_grad_check_command(tmp_path):
    assert run(["grad-check", "--probes", "10", "--out", str(tmp_path / "g")]) == 0
    payload = read_json(tmp_path / "g" / "gradcheck.json")
    assert all(v["passed"] for v in payload.values())


def test_exit_codes(tmp_path, capsys, workspace):
    assert run([]) == 2
    assert run(["frobnicate", "--out", str(tmp_path)]) == 2
    assert run(["gen-data", "--bogus", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text(json.dumps({"lambda": -1}))
    assert run(["train", "--data", str(workspace / "data"), "--config", str(tmp_path / "bad.json"),
                "--out", str(tmp_path / "x")]) == 2
    assert "lambda" in capsys.readouterr().err
    assert run(["build-codebook", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "y")]) == 1
    assert run(["train", "--data", str(workspace / "data"), "--config", str(workspace / "cfg.json"),
                "--out", str(tmp_path / "z")]) == 1  # stage II without a probe


def test_help_lists_defaults(capsys):
    assert run(["--help"]) == 0
    text = capsys.readouterr().out
    for cmd in COMMANDS:
        assert cmd in text
    assert "caption_dropout" in text and "lambda" in text


def test_output_root_override(tmp_path, monkeypatch):
    monkeypatch.setenv("AGEDIT_OUTPUT_ROOT", str(tmp_path))
    assert run(["gen-data", "--n", "5", "--seed", "1", "--out", "rel"]) == 0
    assert (tmp_path / "rel" / "run_manifest.json").exists()
