import json

import pandas as pd
import pytest

from puzzle_ae.cli import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    build_parser,
    load_split,
    main,
    overrides_from_args,
)
from puzzle_ae.config import load_run_config
from puzzle_ae.training import NonFiniteLossError

TINY_RUN = """\
dataset:
  format: synthetic
  channels: 1
  canvas_size: [16, 16]
  num_samples: 32
  num_classes: 2
normal_class: 0
protocol: "2"
train:
  epochs: 2
  batch_size: 8
  depth: 2
  base_channels: 4
  disc_channels: 4
  score_batch_size: 16
  puzzle:
    canvas_size: [16, 16]
"""


@pytest.fixture
def run_yaml(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY_RUN)
    return path


@pytest.fixture
def trained(run_yaml, tmp_path):
    out = tmp_path / "train"
    assert main(["train", "--config", str(run_yaml), "--out", str(out), "--device", "cpu"]) == EXIT_OK
    return out


class TestParser:
    """Test flag parsing and override mapping."""

    def test_overrides_only_for_passed_flags(self):
        args = build_parser().parse_args(["train", "--epsilon", "0.1", "--perm-mode", "exactly_two"])
        overrides = overrides_from_args(args)
        assert overrides["train.attack.epsilon"] == 0.1
        assert overrides["train.puzzle.perm_mode"] == "exactly_two"
        assert overrides["train.epochs"] is None
        assert "tpr_points" not in overrides

    def test_eval_requires_checkpoint(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["eval"])


class TestPerms:
    """Test the permutation listing command."""

    def test_at_least_two(self, capsys):
        assert main(["perms"]) == EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 23
        assert json.loads(lines[0]) == [0, 1, 3, 2]

    def test_exactly_two(self, capsys):
        assert main(["perms", "--grid", "2x2", "--perm-mode", "exactly_two"]) == EXIT_OK
        assert len(capsys.readouterr().out.strip().splitlines()) == 6

    def test_bad_combination(self):
        assert main(["perms", "--grid", "3x3", "--perm-mode", "at_least_two"]) == EXIT_CONFIG


@pytest.mark.integration
class TestCommands:
    """Test end-to-end runs on a tiny synthetic dataset."""

    def test_train_artifacts(self, trained):
        for name in ("checkpoint.pt", "epochs.csv", "training_curves.svg", "manifest.json"):
            assert (trained / name).exists()
        frame = pd.read_csv(trained / "epochs.csv")
        assert frame["epoch"].tolist() == [1, 2]
        assert frame["auroc_avg"].between(0.0, 1.0).all()
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["permutation_hash"]
        assert manifest["stability"]["auroc_avg"]["n"] == 2

    def test_manifest_replay_reproduces_epochs(self, trained, tmp_path):
        replay = tmp_path / "replay"
        code = main(["train", "--config", str(trained / "manifest.json"), "--out", str(replay)])
        assert code == EXIT_OK
        assert (replay / "epochs.csv").read_text() == (trained / "epochs.csv").read_text()

    def test_eval(self, trained, run_yaml, tmp_path):
        out = tmp_path / "eval"
        code = main([
            "eval", "--config", str(run_yaml), "--checkpoint", str(trained / "checkpoint.pt"),
            "--out", str(out), "--tpr", "0.99",
        ])
        assert code == EXIT_OK
        scores = pd.read_csv(out / "scores.csv")
        assert len(scores) == 32
        assert {"sample_id", "label", "S_min", "S_max", "S_avg", "S_norm_22"} <= set(scores.columns)
        report = json.loads((out / "report.json").read_text())
        assert report["aggregation"] == "max"
        assert list(report["fpr_at_tpr"]) == ["0.99"]
        for name in ("report_min.json", "report_avg.json", "roc.csv", "roc.svg", "manifest.json"):
            assert (out / name).exists()

    def test_attack_eval(self, trained, run_yaml, tmp_path):
        out = tmp_path / "attack"
        code = main([
            "attack-eval", "--config", str(run_yaml), "--checkpoint", str(trained / "checkpoint.pt"),
            "--out", str(out), "--variant", "attack1", "attack2", "--epsilon", "0.05",
        ])
        assert code == EXIT_OK
        frame = pd.read_csv(out / "attack_auroc.csv")
        assert len(frame) == 4
        assert frame["epsilon"].tolist() == [0.0, 0.05, 0.0, 0.05]
        clean = frame[frame["epsilon"] == 0.0]["auroc"]
        assert clean.iloc[0] == pytest.approx(clean.iloc[1])

    def test_pae_flags(self, run_yaml, tmp_path):
        out = tmp_path / "pae"
        code = main([
            "train", "--config", str(run_yaml), "--out", str(out),
            "--ablation", "pae", "--epochs", "1",
        ])
        assert code == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["ablation"] == "pae"
        frame = pd.read_csv(out / "epochs.csv")
        assert frame["loss_adv"].tolist() == [0.0]

    def test_sweep(self, run_yaml, tmp_path):
        out = tmp_path / "sweep"
        code = main([
            "sweep", "--config", str(run_yaml), "--out", str(out),
            "--fractions", "1.0", "--epochs", "1",
        ])
        assert code == EXIT_OK
        frame = pd.read_csv(out / "sweep.csv")
        assert frame["fraction"].tolist() == [1.0]
        assert "fpr@tpr_0.99" in frame.columns

    def test_sweep_ignores_run_fraction(self, run_yaml, tmp_path, mocker):
        """Test the sweep subsamples the full training split, not one already cut by fraction."""
        run_yaml.write_text(TINY_RUN + "fraction: 0.5\n")
        sweep = mocker.patch("puzzle_ae.cli.data_efficiency_sweep", return_value={})
        code = main([
            "sweep", "--config", str(run_yaml), "--out", str(tmp_path / "sweep"),
            "--fractions", "0.5",
        ])
        assert code == EXIT_OK
        split = sweep.call_args.args[1]
        full = load_split(load_run_config(run_yaml, {"fraction": 1.0}))
        assert len(split.train) == len(full.train)

    def test_sweep_rejects_fraction_flag(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["sweep", "--fraction", "0.5"])

    def test_protocol1(self, run_yaml, tmp_path):
        out = tmp_path / "p1"
        code = main([
            "protocol1", "--config", str(run_yaml), "--out", str(out),
            "--repeats", "2", "--epochs", "1",
        ])
        assert code == EXIT_OK
        summary = json.loads((out / "protocol1.json").read_text())
        assert len(summary["aurocs"]) == 2


class TestExitCodes:
    """Test error reporting through exit codes."""

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(TINY_RUN.replace("epochs: 2", "epochs: 0"))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_missing_checkpoint(self, run_yaml, tmp_path):
        code = main([
            "eval", "--config", str(run_yaml), "--checkpoint", str(tmp_path / "none.pt"),
            "--out", str(tmp_path / "o"),
        ])
        assert code == EXIT_CONFIG

    def test_numeric_failure(self, run_yaml, tmp_path, mocker):
        mocker.patch("puzzle_ae.cli.fit", side_effect=NonFiniteLossError("loss is nan"))
        code = main(["train", "--config", str(run_yaml), "--out", str(tmp_path / "o")])
        assert code == EXIT_NUMERIC
