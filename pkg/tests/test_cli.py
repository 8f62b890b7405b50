"""End-to-end CLI tests on a small task (seconds per command)."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from sparseforge.cli import main
from sparseforge.recipes import load_recipe, preset


@pytest.fixture
def mini_recipe(tmp_path) -> Path:
    doc = {
        "name": "mini",
        "seed": 0,
        "arch": "tiny",
        "task": {"train_size": 256, "eval_size": 128},
        "dense": {"epochs": 2, "lr_init": 3e-3, "lr_final": 3e-5},
        "prune": {
            "scope": "encoder-only",
            "pruner": "magnitude",
            "sparsity": {"kind": "cubic", "s_init": 0.5, "s_final": 0.9, "num_pruning_steps": 4},
            "lr": {"kind": "recurring_linear", "lr_init": 1e-3, "lr_final": 1e-5, "total_epochs": 4, "cycle_epochs": 2},
            "prune_frequency": 2,
            "stabilization_epochs": 1,
            "kd": {"hardness": 1.0, "temperature": 5.5},
        },
    }
    path = tmp_path / "mini.json"
    path.write_text(json.dumps(doc))
    return path


class TestAnalyze:
    def test_roberta_large_values(self, capsys):
        assert main(["analyze", "roberta-large"]) == 0
        out = capsys.readouterr().out
        assert "301,989,888" in out
        assert "603,979,776" in out

    def test_bert_base(self, capsys):
        assert main(["analyze", "bert-base"]) == 0
        assert "84,934,656" in capsys.readouterr().out

    def test_unknown_arch_fails(self, capsys):
        assert main(["analyze", "gpt-17"]) == 2
        assert "unknown architecture" in capsys.readouterr().err

    def test_csv_emission(self, tmp_path, capsys):
        assert main(["analyze", "tiny", "--out", str(tmp_path)]) == 0
        csv = (tmp_path / "analyze_tiny.csv").read_text()
        assert csv.startswith("component,param_count,")
        assert len(csv.strip().split("\n")) == 4  # header + three groups


class TestTrainPrune:
    def test_train_run_directory(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["train", "--recipe", str(mini_recipe), "--out", str(out)]) == 0
        run_dir = out / "mini-dense-seed0"
        assert (run_dir / "runlog.csv").exists()
        assert (run_dir / "recipe.json").exists()
        assert (run_dir / "checkpoint" / "manifest.json").exists()
        assert json.loads((run_dir / "summary.json").read_text())["epochs"] == 2

    def test_prune_run_directory_and_sparsity(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["prune", "--recipe", str(mini_recipe), "--out", str(out)]) == 0
        stdout = capsys.readouterr().out
        assert "final sparsity 0.9" in stdout
        run_dir = out / "mini-seed0"
        summary = json.loads((run_dir / "summary.json").read_text())
        assert abs(summary["encoder_sparsity"] - 0.9) < 1e-3
        assert (run_dir / "masks" / "masks.json").exists()
        assert (run_dir / "dense_runlog.csv").exists()
        # the run directory is self-describing: the echoed recipe reparses
        assert load_recipe(run_dir / "recipe.json").name == "mini"

    def test_seed_override_changes_log_not_sparsity(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["prune", "--recipe", str(mini_recipe), "--out", str(out)]) == 0
        assert main(["prune", "--recipe", str(mini_recipe), "--seed", "7", "--out", str(out)]) == 0
        log0 = (out / "mini-seed0" / "runlog.csv").read_text()
        log7 = (out / "mini-seed7" / "runlog.csv").read_text()
        assert log0 != log7
        s0 = json.loads((out / "mini-seed0" / "summary.json").read_text())["encoder_sparsity"]
        s7 = json.loads((out / "mini-seed7" / "summary.json").read_text())["encoder_sparsity"]
        assert s0 == s7

    def test_prune_deterministic_per_seed(self, mini_recipe, tmp_path, capsys):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["prune", "--recipe", str(mini_recipe), "--out", str(a)]) == 0
        assert main(["prune", "--recipe", str(mini_recipe), "--out", str(b)]) == 0
        assert (a / "mini-seed0" / "runlog.csv").read_bytes() == (b / "mini-seed0" / "runlog.csv").read_bytes()

    def test_malformed_key_exits_nonzero_naming_key(self, tmp_path, capsys):
        doc = {"name": "bad", "prune": {"scope": "encoder-only", "sparsitee": {}}}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        assert main(["prune", "--recipe", str(path), "--out", str(tmp_path)]) == 2
        assert "sparsitee" in capsys.readouterr().err

    def test_single_precision_runs(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["train", "--recipe", str(mini_recipe), "--out", str(out), "--precision", "single"]) == 0

    def test_one_shot_command(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["one-shot", "--recipe", str(mini_recipe), "--out", str(out)]) == 0
        summary = json.loads((out / "mini-oneshot-seed0" / "summary.json").read_text())
        assert abs(summary["in_scope_sparsity"] - 0.9) < 1e-3
        assert 0.0 <= summary["one_shot_accuracy"] <= 1.0


class TestSweep:
    def test_init_step_sweep_rows_and_medians(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        rc = main([
            "sweep", "init_step", "--values", "0.5,0.7",
            "--recipe", str(mini_recipe), "--seeds", "0,1", "--out", str(out),
        ])
        assert rc == 0
        lines = (out / "sweep_init_step.csv").read_text().strip().split("\n")
        assert lines[0] == "init_step,seed,final_accuracy,median_accuracy"
        assert len(lines) == 1 + 2 * 2  # |values| x |seeds| rows
        by_value = {}
        for ln in lines[1:]:
            value, _, _, med = ln.split(",")
            by_value.setdefault(value, set()).add(med)
        # median column is constant within a sweep value
        assert all(len(m) == 1 for m in by_value.values())

    def test_empty_values_rejected(self, mini_recipe, tmp_path, capsys):
        rc = main(["sweep", "lr", "--values", "", "--recipe", str(mini_recipe), "--out", str(tmp_path)])
        assert rc == 2
        assert "non-empty" in capsys.readouterr().err

    def test_hardness_sweep_needs_kd(self, tmp_path, capsys):
        recipe = {
            "name": "nokd",
            "task": {"train_size": 256, "eval_size": 128},
            "dense": {"epochs": 1},
            "prune": {
                "scope": "encoder-only",
                "sparsity": {"s_init": 0.5, "s_final": 0.9, "num_pruning_steps": 4},
                "lr": {"kind": "recurring_linear", "lr_init": 1e-3, "lr_final": 1e-5, "total_epochs": 4, "cycle_epochs": 2},
                "prune_frequency": 2,
                "stabilization_epochs": 1,
            },
        }
        path = tmp_path / "nokd.json"
        path.write_text(json.dumps(recipe))
        rc = main(["sweep", "hardness", "--values", "0.5", "--recipe", str(path), "--out", str(tmp_path)])
        assert rc == 2
        assert "hardness" in capsys.readouterr().err


class TestSensitivity:
    def test_one_shot_pruner_comparison(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        rc = main([
            "sensitivity", "--scopes", "encoder-only", "--targets", "0.5",
            "--one-shot", "--compare-pruners",
            "--recipe", str(mini_recipe), "--out", str(out),
        ])
        assert rc == 0
        lines = (out / "sensitivity.csv").read_text().strip().split("\n")
        assert lines[0] == "scope,target,seed,pruner,accuracy"
        assert len(lines) == 3  # header + magnitude + diagonal_fisher
        pruners = {ln.split(",")[3] for ln in lines[1:]}
        assert pruners == {"magnitude", "diagonal_fisher"}

    def test_target_zero_equals_dense(self, mini_recipe, tmp_path, capsys):
        out = tmp_path / "runs"
        rc = main([
            "sensitivity", "--scopes", "encoder-only", "--targets", "0",
            "--one-shot", "--recipe", str(mini_recipe), "--out", str(out),
        ])
        assert rc == 0
        line = (out / "sensitivity.csv").read_text().strip().split("\n")[1]
        acc = float(line.split(",")[4])
        assert 0.0 <= acc <= 1.0

    def test_unknown_scope_rejected(self, mini_recipe, tmp_path, capsys):
        rc = main([
            "sensitivity", "--scopes", "everything", "--targets", "0.5",
            "--recipe", str(mini_recipe), "--out", str(tmp_path),
        ])
        assert rc == 2
        assert "unknown scope" in capsys.readouterr().err


class TestScheduleDump:
    def test_gmp_star_trajectory(self, tmp_path, capsys):
        assert main(["schedule-dump", "--recipe", "gmp-star-10ep", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "schedule_gmp-star-10ep.csv").read_text().strip().split("\n")
        assert lines[0] == "step,lr,sparsity"
        assert len(lines) == 1 + 2500  # 10 epochs x 250 steps
        lrs = [float(ln.split(",")[1]) for ln in lines[1:]]
        sparsities = [float(ln.split(",")[2]) for ln in lines[1:]]
        # five 2-epoch cycles, each rewinding to the initial rate
        rewinds = [i for i, lr in enumerate(lrs) if lr == 1e-4]
        assert rewinds == [0, 500, 1000, 1500, 2000]
        # flat at zero through stabilization, then jumps to the init step
        assert set(sparsities[:525]) == {0.0}
        assert sparsities[525] == 0.7
        assert all(a <= b for a, b in zip(sparsities, sparsities[1:]))
        assert sparsities[-1] == 0.9

    def test_one_shot_single_jump(self, tmp_path, capsys):
        assert main(["schedule-dump", "--recipe", "one-shot", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "schedule_one-shot.csv").read_text().strip().split("\n")
        sparsities = [float(ln.split(",")[2]) for ln in lines[1:]]
        assert set(sparsities) == {0.0, 0.9}


class TestPresetDump:
    def test_stdout_parses_and_matches(self, capsys):
        assert main(["preset-dump", "gmp-star-10ep"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["prune"]["lr"]["lr_init"] == 1e-4

    def test_file_round_trips(self, tmp_path, capsys):
        assert main(["preset-dump", "smc-style", "--out", str(tmp_path)]) == 0
        assert load_recipe(tmp_path / "smc-style.json") == preset("smc-style")

    def test_unknown_preset_rejected_by_argparse(self, capsys):
        with pytest.raises(SystemExit):
            main(["preset-dump", "gmp-star-9000ep"])
