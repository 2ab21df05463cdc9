import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from migen import cli
from migen.data import load_dataset
from migen.decode import BeamConfig, greedy_decode
from migen.errors import ContractError
from migen.experiments import evaluate_reports, generate_reports
from migen.model import MIGenModel, load_checkpoint
from migen.vocab import decode

TINY = """
[synth]
grid_side = 4
embed_dim = 6
max_radius = 1
n_train = 6
n_val = 0
n_test = 3
seed = 5

[model]
n_layers = 1
n_heads = 2
d_model = 8
d_ff = 16
max_report_len = 20
pam_kernels = [3]

[train]
learning_rate = 1e-2
max_steps = 4
batch_size = 2
log_interval = 0

[decode]
beam_size = 2
max_len = 16

[classify]
steps = 3
"""


def tree_digest(root: Path, skip=("run.json",)) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.toml").write_text(TINY)
    cfg = str(root / "tiny.toml")
    assert cli.main(["synth", "--config", cfg, "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root, cfg


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_counts_and_manifest(work):
    root, _ = work
    ds = load_dataset(root / "data")
    assert (len(ds.train), len(ds.val), len(ds.test)) == (6, 0, 3)
    runs = json.loads((root / "data" / "run.json").read_text())["runs"]
    assert len(runs) == 1 and runs[0]["command"] == "synth" and runs[0]["config"]["synth"]["n_train"] == 6


def test_synth_is_byte_identical(work, tmp_path):
    root, cfg = work
    assert run("synth", "--config", cfg, "--out", tmp_path / "again") == 0
    assert tree_digest(tmp_path / "again") == tree_digest(root / "data")


def test_synth_refuses_non_empty_dir(work, capsys):
    root, cfg = work
    assert run("synth", "--config", cfg, "--out", root / "data") == 1
    assert "--force" in capsys.readouterr().err


def test_synth_force_rewrites(work, tmp_path):
    root, cfg = work
    out = tmp_path / "forced"
    assert run("synth", "--config", cfg, "--out", out) == 0
    assert run("synth", "--config", cfg, "--out", out, "--force", "--set", "synth.n_train=2") == 0
    assert len(load_dataset(out).train) == 2
    assert len(list((out / "bags").glob("*.json"))) == 5


def test_synth_invalid_radius_names_field(tmp_path, capsys):
    assert run("synth", "--set", "synth.max_radius=9", "--out", tmp_path / "x") == 1
    assert "max_radius" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    assert run("synth", "--set", "synth.colour=3", "--out", tmp_path / "x") == 1
    assert "synth.colour" in capsys.readouterr().err


def test_train_outputs(work):
    root, _ = work
    run_dir = root / "run"
    assert {p.name for p in run_dir.iterdir()} >= {"model.ckpt", "optim.ckpt", "loss.csv", "run.json"}
    rows = list(csv.DictReader((run_dir / "loss.csv").read_text().splitlines()))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    _, meta = load_checkpoint(run_dir / "model.ckpt")
    assert meta["step"] == 4


def test_train_is_byte_identical(work, tmp_path):
    root, cfg = work
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "r") == 0
    assert tree_digest(tmp_path / "r") == tree_digest(root / "run")


def test_zero_steps_checkpoint_is_initialisation(work, tmp_path):
    root, cfg = work
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "r", "--max-steps", 0) == 0
    model, _ = load_checkpoint(tmp_path / "r" / "model.ckpt")
    fresh = MIGenModel(model.config)
    assert all(np.array_equal(model.params[k].data, fresh.params[k].data) for k in fresh.params)


def test_resume_continues_loss(work, tmp_path):
    root, cfg = work
    assert run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "r",
               "--resume", root / "run", "--max-steps", 2) == 0
    rows = list(csv.DictReader((tmp_path / "r" / "loss.csv").read_text().splitlines()))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4, 5, 6]
    before, after = float(rows[3]["loss"]), float(rows[4]["loss"])
    assert abs(after - before) <= 0.1 * before + 0.05
    _, meta = load_checkpoint(tmp_path / "r" / "model.ckpt")
    assert meta["step"] == 6


def test_resume_refuses_vocab_mismatch(work, tmp_path, capsys):
    root, cfg = work
    other = tmp_path / "other"
    assert run("synth", "--config", cfg, "--out", other, "--set", 'synth.templates=["{subtype} {diameter} {quadrant}"]') == 0
    assert run("train", "--config", cfg, "--data", other, "--out", tmp_path / "r", "--resume", root / "run") == 1
    assert "vocabulary" in capsys.readouterr().err


def test_train_refuses_writing_into_dataset(work):
    root, cfg = work
    assert run("train", "--config", cfg, "--data", root / "data", "--out", root / "data") == 1


def test_generate_beam_one_matches_greedy_harness(work, tmp_path):
    root, cfg = work
    assert run("generate", "--config", cfg, "--checkpoint", root / "run" / "model.ckpt", "--data", root / "data",
               "--beam", 1, "--out", tmp_path / "g") == 0
    rows = json.loads((tmp_path / "g" / "generated_test.json").read_text())
    model, _ = load_checkpoint(root / "run" / "model.ckpt")
    ds = load_dataset(root / "data")
    expected = [decode(greedy_decode(model, b.embeddings, 16), ds.vocab) for b in ds.test]
    assert [r["report"] for r in rows] == expected


def test_generate_rerun_identical_and_empty_split(work, tmp_path):
    root, cfg = work
    ckpt, data = root / "run" / "model.ckpt", root / "data"
    for out in ("a", "b"):
        assert run("generate", "--config", cfg, "--checkpoint", ckpt, "--data", data, "--out", tmp_path / out) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert run("generate", "--config", cfg, "--checkpoint", ckpt, "--data", data, "--split", "val",
               "--out", tmp_path / "v") == 0
    assert (tmp_path / "v" / "generated_val.csv").read_text() == "bag_id,report\n"
    assert json.loads((tmp_path / "v" / "generated_val.json").read_text()) == []


def test_generate_unknown_split(work, tmp_path):
    root, cfg = work
    assert run("generate", "--checkpoint", root / "run" / "model.ckpt", "--data", root / "data",
               "--split", "holdout", "--out", tmp_path / "g") == 1


def test_evaluate_ground_truth_scores_one(work, tmp_path):
    root, _ = work
    ds = load_dataset(root / "data")
    gen = tmp_path / "truth.json"
    gen.write_text(json.dumps([{"bag_id": b.bag_id, "report": b.report} for b in ds.test]))
    assert run("evaluate", "--generated", gen, "--data", root / "data", "--out", tmp_path / "e") == 0
    result = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert result["aggregate"]["bleu_1"] == 1.0 and result["aggregate"]["quadrant_ok"] == 1.0
    assert result["classification"]["accuracy"] == 1.0


def test_evaluate_reads_generate_csv(work, tmp_path):
    root, cfg = work
    assert run("generate", "--config", cfg, "--checkpoint", root / "run" / "model.ckpt", "--data", root / "data",
               "--out", tmp_path / "g") == 0
    for suffix in ("json", "csv"):
        assert run("evaluate", "--generated", tmp_path / "g" / f"generated_test.{suffix}", "--data", root / "data",
                   "--out", tmp_path / suffix) == 0
    assert (tmp_path / "json" / "eval.json").read_text() == (tmp_path / "csv" / "eval.json").read_text()


def test_evaluate_refuses_unknown_ids(work, tmp_path, capsys):
    root, _ = work
    gen = tmp_path / "bad.json"
    gen.write_text(json.dumps([{"bag_id": "nope-1", "report": "x"}, {"bag_id": "nope-2", "report": "y"}]))
    assert run("evaluate", "--generated", gen, "--data", root / "data", "--out", tmp_path / "e") == 1
    err = capsys.readouterr().err
    assert "nope-1" in err and "nope-2" in err


def test_mask_sweep_ratio_zero_equals_plain_evaluation(work, tmp_path):
    root, cfg = work
    ckpt = root / "run" / "model.ckpt"
    assert run("mask-sweep", "--config", cfg, "--checkpoint", f"pam={ckpt}", "--data", root / "data",
               "--ratios", "0,0.5", "--out", tmp_path / "m") == 0
    rows = list(csv.DictReader((tmp_path / "m" / "mask_sweep.csv").read_text().splitlines()))
    assert [(r["ratio"], r["model"]) for r in rows] == [("0.0", "pam"), ("0.5", "pam")]
    model, _ = load_checkpoint(ckpt)
    ds = load_dataset(root / "data")
    gen = {g["bag_id"]: g["report"] for g in generate_reports(model, ds.test, ds.vocab, BeamConfig(2, 16))}
    agg = evaluate_reports(gen, ds.test)["aggregate"]
    assert float(rows[0]["bleu_1"]) == agg["bleu_1"] and float(rows[0]["quadrant_acc"]) == agg["quadrant_ok"]


def test_pam_ablation_and_shuffle_study(work, tmp_path):
    root, cfg = work
    args = ("--config", cfg, "--data", root / "data", "--max-steps", 2)
    assert run("pam-ablate", *args, "--variants", "off,k3", "--out", tmp_path / "a") == 0
    assert run("pam-ablate", *args, "--variants", "off,k3", "--out", tmp_path / "b") == 0
    table = (tmp_path / "a" / "pam_ablation.csv").read_text()
    assert table == (tmp_path / "b" / "pam_ablation.csv").read_text()
    assert [r["variant"] for r in csv.DictReader(table.splitlines())] == ["off", "k3"]
    assert run("pam-ablate", *args, "--variants", "k99", "--out", tmp_path / "c") == 1
    assert run("shuffle-study", *args, "--out", tmp_path / "s") == 0
    rows = list(csv.DictReader((tmp_path / "s" / "shuffle_study.csv").read_text().splitlines()))
    assert {(r["augmentation"], r["model"]) for r in rows} == {
        (a, m) for a in ("none", "shuffle", "shuffle+mask") for m in ("pam", "no_pam")}


def test_classify_modes(work, tmp_path):
    root, cfg = work
    data, ckpt = root / "data", root / "run" / "model.ckpt"
    assert run("classify", "--config", cfg, "--ground-truth", "--mode", "semantic", "--data", data,
               "--out", tmp_path / "c") == 0
    assert json.loads((tmp_path / "c" / "classify_semantic.json").read_text())["accuracy"] == 1.0
    assert run("classify", "--config", cfg, "--checkpoint", ckpt, "--mode", "finetune", "--data", data,
               "--out", tmp_path / "c") == 0
    scores = json.loads((tmp_path / "c" / "classify_finetune.json").read_text())
    assert scores["n"] == 3 and scores["mode"] == "finetune"
    runs = json.loads((tmp_path / "c" / "run.json").read_text())["runs"]
    assert [r["command"] for r in runs] == ["classify", "classify"]
    assert run("classify", "--mode", "semantic", "--data", data, "--out", tmp_path / "d") == 1


def test_commands_do_not_touch_dataset(work, tmp_path):
    root, cfg = work
    before = tree_digest(root / "data", skip=())
    run("generate", "--config", cfg, "--checkpoint", root / "run" / "model.ckpt", "--data", root / "data",
        "--out", tmp_path / "g")
    run("train", "--config", cfg, "--data", root / "data", "--out", tmp_path / "t", "--max-steps", 1)
    assert tree_digest(root / "data", skip=()) == before


def test_output_root_override(work, tmp_path, monkeypatch):
    _, cfg = work
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert run("synth", "--config", cfg, "--out", "rel") == 0
    assert (tmp_path / "rel" / "manifest.json").exists()


def test_internal_error_exit_code(monkeypatch, tmp_path):
    def boom(args):
        raise ContractError("invariant broken")
    parser = cli.build_parser()
    monkeypatch.setattr(cli, "build_parser", lambda: parser)
    for action in parser._subparsers._group_actions[0].choices.values():
        if action.prog.endswith("synth"):
            action.set_defaults(func=boom)
    assert run("synth", "--out", tmp_path / "x") == 2


def test_missing_dataset_is_user_error(tmp_path):
    assert run("train", "--data", tmp_path / "nothing", "--out", tmp_path / "o") == 1
