"""End-to-end command-line tests on a miniature world: every subcommand,
config layering, output artifacts, idempotence, and stable exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from gradedit.cli import main

WORLD_CFG = {
    "num_entities": 6,
    "num_relations": 2,
    "num_classes": 5,
    "feature_dim": 12,
    "paraphrases_per_fact": 3,
    "pretrain_per_fact": 20,
    "records_per_fact": 2,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain -> train-editor, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    world_cfg = root / "world.json"
    world_cfg.write_text(json.dumps(WORLD_CFG))
    assert main(["gen-data", "--config", str(world_cfg), "--out-dir", str(root)]) == 0

    pretrain_cfg = root / "pretrain.json"
    pretrain_cfg.write_text(json.dumps({"hidden_dims": [16], "epochs": 60}))
    assert main([
        "pretrain", "--config", str(pretrain_cfg),
        "--dataset", str(root / "dataset.jsonl"), "--out-dir", str(root),
    ]) == 0

    train_cfg = root / "train.json"
    train_cfg.write_text(json.dumps({"max_steps": 5, "batch_size": 2, "eval_every": 0}))
    assert main([
        "train-editor", "--config", str(train_cfg),
        "--dataset", str(root / "dataset.jsonl"),
        "--model", str(root / "model.json"), "--out-dir", str(root),
    ]) == 0
    return root


def test_gen_data_outputs(pipeline):
    assert (pipeline / "dataset.jsonl").exists()
    summary = json.loads((pipeline / "dataset_summary.json").read_text())
    assert summary["num_facts"] == 12
    assert summary["edit_train_records"] + summary["edit_test_records"] == 24
    snap = json.loads((pipeline / "gen_data_config.json").read_text())
    assert snap["num_entities"] == 6


def test_gen_data_is_idempotent(pipeline, tmp_path):
    cfg = tmp_path / "world.json"
    cfg.write_text(json.dumps(WORLD_CFG))
    assert main(["gen-data", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    assert (
        (tmp_path / "dataset.jsonl").read_bytes()
        == (pipeline / "dataset.jsonl").read_bytes()
    )


def test_pretrain_outputs(pipeline):
    assert (pipeline / "model.json").exists()
    summary = json.loads((pipeline / "pretrain_summary.json").read_text())
    assert summary["accuracy"] > 0.8


def test_train_editor_outputs(pipeline):
    assert (pipeline / "editor.json").exists()
    log_lines = (pipeline / "train_log.jsonl").read_text().splitlines()
    assert len(log_lines) == 5
    entry = json.loads(log_lines[0])
    assert {"step", "l_e", "l_loc", "l_total"} <= set(entry)
    snap = json.loads((pipeline / "train_editor_config.json").read_text())
    assert snap["variant"] == "full"
    assert snap["max_steps"] == 5


def test_edit_command(pipeline, tmp_path):
    dataset = (pipeline / "dataset.jsonl").read_text().splitlines()
    record = next(
        json.loads(line) for line in dataset[1:]
        if json.loads(line)["split"] == "edit_test"
    )
    edit_input = tmp_path / "edit.json"
    edit_input.write_text(json.dumps({"edits": [{"x": record["x"], "y": record["y"]}]}))
    assert main([
        "edit", "--model", str(pipeline / "model.json"),
        "--editor", str(pipeline / "editor.json"),
        "--edit-input", str(edit_input), "--out-dir", str(tmp_path),
    ]) == 0
    assert (tmp_path / "edited_model.json").exists()
    preds = json.loads((tmp_path / "edit_predictions.json").read_text())
    assert preds[0]["target"] == record["y"]
    assert {"argmax_pre", "argmax_post"} <= set(preds[0])


def test_eval_command_with_baselines(pipeline, tmp_path):
    assert main([
        "eval", "--dataset", str(pipeline / "dataset.jsonl"),
        "--model", str(pipeline / "model.json"),
        "--editor", str(pipeline / "editor.json"),
        "--k-edits", "1,2", "--baselines", "--out-dir", str(tmp_path),
    ]) == 0
    lines = (tmp_path / "report.csv").read_text().splitlines()
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == [
        "learned@k=1", "learned@k=2",
        "ft@k=1", "ft_kl@k=1", "ft@k=2", "ft_kl@k=2",
    ]
    payload = json.loads((tmp_path / "report.json").read_text())
    assert len(payload["reports"]) == 6
    timing = json.loads((tmp_path / "report_timing.json").read_text())
    assert set(timing) == set(names)


def test_eval_reports_are_deterministic(pipeline, tmp_path_factory):
    out_a = tmp_path_factory.mktemp("eval_a")
    out_b = tmp_path_factory.mktemp("eval_b")
    for out in (out_a, out_b):
        assert main([
            "eval", "--dataset", str(pipeline / "dataset.jsonl"),
            "--model", str(pipeline / "model.json"),
            "--editor", str(pipeline / "editor.json"),
            "--k-edits", "2", "--parallel", "2", "--out-dir", str(out),
        ]) == 0
    assert (out_a / "report.csv").read_bytes() == (out_b / "report.csv").read_bytes()
    assert (out_a / "report.json").read_bytes() == (out_b / "report.json").read_bytes()


def test_ablate_command(pipeline, tmp_path):
    assert main([
        "ablate", "--dataset", str(pipeline / "dataset.jsonl"),
        "--model", str(pipeline / "model.json"),
        "--steps", "2", "--out-dir", str(tmp_path),
    ]) == 0
    lines = (tmp_path / "ablation_report.csv").read_text().splitlines()
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == [
        "full", "no_sharing", "no_norm", "no_id_init",
        "only_u", "only_delta", "only_smaller",
    ]


def test_config_error_exit_code(tmp_path):
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps({"not_a_real_key": 1}))
    assert main(["gen-data", "--config", str(bad_cfg), "--out-dir", str(tmp_path)]) == 2
    bad_cfg.write_text("{broken json")
    assert main(["gen-data", "--config", str(bad_cfg), "--out-dir", str(tmp_path)]) == 2
    # missing required input is a config error too
    assert main(["pretrain", "--out-dir", str(tmp_path)]) == 2


def test_data_error_exit_code(pipeline, tmp_path):
    missing = tmp_path / "nope.jsonl"
    assert main([
        "pretrain", "--dataset", str(missing), "--out-dir", str(tmp_path)
    ]) == 3
    corrupt = tmp_path / "corrupt.jsonl"
    corrupt.write_text("not json at all\n")
    assert main([
        "pretrain", "--dataset", str(corrupt), "--out-dir", str(tmp_path)
    ]) == 3


def test_bad_k_edits_exit_code(pipeline, tmp_path):
    assert main([
        "eval", "--dataset", str(pipeline / "dataset.jsonl"),
        "--model", str(pipeline / "model.json"),
        "--editor", str(pipeline / "editor.json"),
        "--k-edits", "zero", "--out-dir", str(tmp_path),
    ]) == 2


def test_unknown_variant_exit_code(pipeline, tmp_path):
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"variant": "bogus", "max_steps": 1}))
    assert main([
        "train-editor", "--config", str(cfg),
        "--dataset", str(pipeline / "dataset.jsonl"),
        "--model", str(pipeline / "model.json"), "--out-dir", str(tmp_path),
    ]) == 2


def test_module_entry_point(tmp_path):
    cfg = tmp_path / "world.json"
    cfg.write_text(json.dumps(WORLD_CFG))
    proc = subprocess.run(
        [sys.executable, "-m", "gradedit.cli", "gen-data",
         "--config", str(cfg), "--out-dir", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "dataset.jsonl" in proc.stdout
