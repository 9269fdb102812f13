"""Protocol-2 training on MNIST digits and the resulting detection quality."""
import json

import pytest

from puzzle_ae.cli import EXIT_OK, main

MNIST_RUN = """\
dataset:
  format: idx_pair
  root: {root}
  channels: 1
  canvas_size: [32, 32]
  resize_mode: pad
normal_class: {normal_class}
protocol: "2"
train:
  epochs: {epochs}
  batch_size: 128
  seed: 0
"""

# loose floors: short runs fall well below fully trained numbers
AUROC_FLOOR = {1: 0.95, 0: 0.9}


@pytest.mark.slow
@pytest.mark.integration
class TestMNISTReproduction:
    """Train, evaluate and attack on one MNIST digit."""

    @pytest.mark.parametrize("normal_class", sorted(AUROC_FLOOR))
    def test_train_and_eval(self, mnist_root, e2e_epochs, device, tmp_path, normal_class):
        config_path = tmp_path / "mnist.yaml"
        config_path.write_text(
            MNIST_RUN.format(root=mnist_root, normal_class=normal_class, epochs=e2e_epochs)
        )
        train_out = tmp_path / "train"
        assert main([
            "train", "--config", str(config_path), "--out", str(train_out), "--device", device,
        ]) == EXIT_OK

        eval_out = tmp_path / "eval"
        assert main([
            "eval", "--config", str(config_path), "--checkpoint", str(train_out / "checkpoint.pt"),
            "--out", str(eval_out), "--device", device,
        ]) == EXIT_OK
        report = json.loads((eval_out / "report.json").read_text())
        assert report["aggregation"] == "max"
        assert report["n_normal"] + report["n_anomalous"] == 10000
        assert report["auroc"] >= AUROC_FLOOR[normal_class]

    def test_attack_lowers_auroc(self, mnist_root, e2e_epochs, device, tmp_path):
        config_path = tmp_path / "mnist.yaml"
        config_path.write_text(MNIST_RUN.format(root=mnist_root, normal_class=1, epochs=e2e_epochs))
        train_out = tmp_path / "train"
        assert main([
            "train", "--config", str(config_path), "--out", str(train_out), "--device", device,
        ]) == EXIT_OK

        attack_out = tmp_path / "attack"
        assert main([
            "attack-eval", "--config", str(config_path),
            "--checkpoint", str(train_out / "checkpoint.pt"), "--out", str(attack_out),
            "--epsilon", "0.2", "--device", device,
        ]) == EXIT_OK
        lines = (attack_out / "attack_auroc.csv").read_text().splitlines()
        clean, attacked = (float(line.split(",")[2]) for line in lines[1:3])
        assert attacked <= clean
