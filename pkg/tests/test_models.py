import pytest
from pydantic import ValidationError

from puzzle_ae.models import (
    Ablation,
    AttackConfig,
    DatasetSpec,
    EvalReport,
    LabelRule,
    MaskMode,
    PermMode,
    PuzzleConfig,
    ResizeMode,
    RunConfig,
    RunManifest,
    ScoreRequest,
    TrainConfig,
)


class TestPuzzleConfig:
    """Test puzzle geometry validation."""

    def test_defaults(self):
        """Test default 2x2 grid on a 32x32 canvas."""
        cfg = PuzzleConfig()
        assert cfg.grid == (2, 2)
        assert cfg.perm_mode == PermMode.AT_LEAST_TWO
        assert cfg.canvas_size == (32, 32)

    def test_mask_mode_resolution(self):
        """Test gray data inpaints and color data colorizes unless told otherwise."""
        cfg = PuzzleConfig()
        assert cfg.resolved_mask_mode(1) == MaskMode.INPAINT
        assert cfg.resolved_mask_mode(3) == MaskMode.COLORIZE
        assert PuzzleConfig(mask_mode="none").resolved_mask_mode(3) == MaskMode.NONE

    def test_unsupported_grid(self):
        with pytest.raises(ValidationError):
            PuzzleConfig(grid=(4, 4))

    def test_indivisible_canvas(self):
        with pytest.raises(ValidationError):
            PuzzleConfig(grid=(3, 3), perm_mode="exactly_two", canvas_size=(32, 32))

    def test_nine_part_needs_three_by_three(self):
        with pytest.raises(ValidationError):
            PuzzleConfig(perm_mode="nine_part")

    def test_at_least_two_needs_two_by_two(self):
        with pytest.raises(ValidationError):
            PuzzleConfig(grid=(3, 3), canvas_size=(48, 48))


class TestAttackConfig:
    """Test perturbation settings."""

    def test_defaults(self):
        cfg = AttackConfig()
        assert (cfg.epsilon, cfg.alpha, cfg.steps) == (0.05, 0.05, 1)

    def test_single_step_alpha_bounded(self):
        with pytest.raises(ValidationError):
            AttackConfig(epsilon=0.05, alpha=0.1)

    def test_multi_step_alpha_free(self):
        assert AttackConfig(epsilon=0.05, alpha=0.1, steps=5).alpha == 0.1

    def test_zero_epsilon_alpha_free(self):
        assert AttackConfig(epsilon=0.0, alpha=0.1).epsilon == 0.0

    def test_negative_epsilon(self):
        with pytest.raises(ValidationError):
            AttackConfig(epsilon=-0.01)


class TestTrainConfig:
    """Test training hyperparameters and ablations."""

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr_unet == 1e-3
        assert cfg.lr_disc == 2e-4
        assert cfg.plateau_patience == 50
        assert cfg.plateau_factor == 0.8
        assert cfg.batch_size == 128

    def test_plateau_factor_range(self):
        with pytest.raises(ValidationError):
            TrainConfig(plateau_factor=1.0)

    def test_pae_ablation(self):
        """Test the plain puzzle autoencoder drops the adversary, attack and mask."""
        cfg = TrainConfig().apply_ablation(Ablation.PAE)
        assert cfg.lambda_adv == 0.0
        assert cfg.attack.epsilon == 0.0
        assert cfg.puzzle.mask_mode == MaskMode.NONE

    def test_cpae_ablation(self):
        cfg = TrainConfig().apply_ablation(Ablation.CPAE)
        assert cfg.lambda_adv == 0.0
        assert cfg.attack.epsilon == 0.05
        assert cfg.puzzle.mask_mode is None

    def test_cpae_g_restores_adversary(self):
        cfg = TrainConfig(lambda_adv=0.0).apply_ablation(Ablation.CPAE_G)
        assert cfg.lambda_adv == 1.0

    def test_ablation_is_idempotent(self):
        once = TrainConfig().apply_ablation(Ablation.PAE)
        assert once.apply_ablation(Ablation.PAE) == once

    def test_ablation_leaves_original(self):
        cfg = TrainConfig()
        cfg.apply_ablation(Ablation.PAE)
        assert cfg.lambda_adv == 1.0


class TestRunConfig:
    """Test run-level validation."""

    def test_canvas_must_match(self):
        with pytest.raises(ValidationError):
            RunConfig(dataset=DatasetSpec(canvas_size=(64, 64)))

    def test_resolved_train_config(self):
        cfg = RunConfig(ablation="pae")
        assert cfg.resolved_train_config().lambda_adv == 0.0
        assert cfg.train.lambda_adv == 1.0

    def test_fraction_range(self):
        with pytest.raises(ValidationError):
            RunConfig(fraction=0.0)

    def test_dataset_channels(self):
        with pytest.raises(ValidationError):
            DatasetSpec(channels=2)

    def test_label_file_required(self):
        with pytest.raises(ValidationError):
            DatasetSpec(label_rule=LabelRule.LABEL_FILE)

    def test_resize_mode_defaults_by_format(self):
        assert DatasetSpec(format="idx_pair").resize_mode == ResizeMode.PAD
        assert DatasetSpec(format="image_folder").resize_mode == ResizeMode.RESIZE
        assert DatasetSpec(format="idx_pair", resize_mode="resize").resize_mode == ResizeMode.RESIZE


class TestRecords:
    """Test reports, manifests and API payloads."""

    def test_eval_report_fpr_range(self):
        with pytest.raises(ValidationError):
            EvalReport(auroc=0.9, fpr_at_tpr={"0.99": 1.5}, n_normal=1, n_anomalous=1, aggregation="max")

    def test_manifest_defaults(self):
        manifest = RunManifest(command="train", config={}, seed=0, version="0.1.0")
        assert manifest.outputs == {}
        assert manifest.created_at

    def test_score_request_requires_pixels(self):
        with pytest.raises(ValidationError):
            ScoreRequest()

    def test_score_request_aggregation(self):
        request = ScoreRequest(pixels=[[[0.0]]], aggregation="avg")
        assert request.aggregation.value == "avg"
