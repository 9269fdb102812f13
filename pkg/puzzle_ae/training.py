"""
Joint training of the puzzle-solving U-Net and its feature-matching discriminator.

Every image of a batch gets its own permutation and masked cell; the puzzle is pushed off the
shortcut manifold by FGSM/PGD before the U-Net solves it. The generator minimizes
``L_rec + lambda * L_adv``; the discriminator separates originals from reconstructions.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from .adversarial import perturb
from .checkpoint import Checkpoint, save_checkpoint
from .models import EpochRecord, MaskMode, PermMode, TrainConfig
from .networks import (
    Discriminator,
    ReconstructionNet,
    build_discriminator,
    build_reconstruction_net,
)
from .puzzle_engine import (
    enumerate_permutations,
    make_puzzle_batch,
    mapping_tensor,
    sample_nine_part_layout,
    scoring_permutations,
)
from .scoring import NormalizerTable, compute_normalizers

logger = logging.getLogger(__name__)

EpochEvaluator = Callable[[ReconstructionNet, NormalizerTable], Dict[str, float]]


class TrainingError(ValueError):
    """Training cannot start: empty data or inconsistent settings."""
    pass


class NonFiniteLossError(ArithmeticError):
    """A loss became NaN or infinite during training."""
    pass


def reconstruction_loss(output: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample L2 distance between solution and original."""
    if output.shape != original.shape:
        raise TrainingError(
            f"reconstruction shape {tuple(output.shape)} != original {tuple(original.shape)}"
        )
    return (output - original).flatten(start_dim=1).norm(p=2, dim=1).mean()


def adversarial_feature_loss(
    features_real: torch.Tensor, features_fake_mean: torch.Tensor
) -> torch.Tensor:
    """Feature matching: distance of real features to the mean fake feature vector.

    ``features_real`` is [F] or [B, F]; for a batch the per-sample distances are averaged.
    Pass detached real features so only the generator receives gradient.
    """
    if features_real.shape[-1:] != features_fake_mean.shape[-1:] or features_fake_mean.dim() != 1:
        raise TrainingError(
            f"feature shapes differ: {tuple(features_real.shape)} vs "
            f"{tuple(features_fake_mean.shape)}"
        )
    diff = features_real - features_fake_mean
    if diff.dim() == 1:
        return diff.norm(p=2)
    return diff.norm(p=2, dim=-1).mean()


def total_loss(
    loss_rec: Union[torch.Tensor, float],
    loss_adv: Union[torch.Tensor, float],
    lambda_adv: float,
) -> Union[torch.Tensor, float]:
    if lambda_adv == 0:
        return loss_rec
    return loss_rec + lambda_adv * loss_adv


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Mean of the real and fake binary cross-entropies; all-zero logits give ln 2."""
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return 0.5 * (real + fake)


def discriminator_step(
    disc: Discriminator,
    optimizer: torch.optim.Optimizer,
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
) -> float:
    """One optimizer step on the discriminator. The fake batch is detached from the generator."""
    optimizer.zero_grad(set_to_none=True)
    real_logits, _ = disc(real_batch.detach())
    fake_logits, _ = disc(fake_batch.detach())
    loss = discriminator_loss(real_logits, fake_logits)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def set_deterministic(seed: int, enabled: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    if enabled:
        torch.use_deterministic_algorithms(True, warn_only=True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False


@dataclass
class _EpochTotals:
    rec: float = 0.0
    adv: float = 0.0
    disc: float = 0.0
    samples: int = 0
    disc_batches: int = 0


class PuzzleTrainer:
    """Owns both networks, their optimizers and plateau schedulers, and the sampling generator."""

    def __init__(
        self,
        cfg: TrainConfig,
        channels: int,
        device: Union[str, torch.device] = "cpu",
        unet: Optional[ReconstructionNet] = None,
        disc: Optional[Discriminator] = None,
    ):
        self.logger = logging.getLogger(__name__)
        self.cfg = cfg
        self.channels = channels
        self.device = torch.device(device)
        self.grid = cfg.puzzle.grid
        self.image_size = cfg.puzzle.canvas_size[0]
        self.mask_mode = cfg.puzzle.resolved_mask_mode(channels)
        if self.mask_mode == MaskMode.COLORIZE and channels != 3:
            raise TrainingError("mask_mode colorize requires 3-channel data")
        self.nine_part = cfg.puzzle.perm_mode == PermMode.NINE_PART

        set_deterministic(cfg.seed, cfg.deterministic)
        self.generator = torch.Generator().manual_seed(cfg.seed)

        self.unet = unet or build_reconstruction_net(
            channels, self.image_size, cfg.depth, cfg.base_channels, seed=cfg.seed
        )
        self.disc = disc or build_discriminator(
            channels, self.image_size, cfg.disc_channels, seed=cfg.seed + 1
        )
        self.unet.to(self.device)
        self.disc.to(self.device)

        # nine-part puzzles are drawn layout by layout instead of from the 22 260-member table
        self.train_mappings = None
        if not self.nine_part:
            self.train_mappings = mapping_tensor(
                enumerate_permutations(self.grid, cfg.puzzle.perm_mode)
            )
        self.score_perms = scoring_permutations(
            self.grid, cfg.puzzle.perm_mode, cfg.puzzle.max_score_permutations, seed=cfg.seed
        )

        self.opt_unet = torch.optim.Adam(
            self.unet.parameters(), lr=cfg.lr_unet, weight_decay=cfg.weight_decay
        )
        self.opt_disc = torch.optim.Adam(self.disc.parameters(), lr=cfg.lr_disc)
        # lr drops on the plateau_patience-th epoch without improvement
        patience = max(cfg.plateau_patience - 1, 0)
        self.sched_unet = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.opt_unet, mode="min", factor=cfg.plateau_factor, patience=patience
        )
        self.sched_disc = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.opt_disc, mode="min", factor=cfg.plateau_factor, patience=patience
        )
        self.epoch = 0
        self.last_checkpoint: Optional[Path] = None

    @property
    def lr_unet(self) -> float:
        return float(self.opt_unet.param_groups[0]["lr"])

    @property
    def lr_disc(self) -> float:
        return float(self.opt_disc.param_groups[0]["lr"])

    def sample_puzzles(self, images: torch.Tensor) -> torch.Tensor:
        """Per-image permutation (uniform over the training set) and masked cell."""
        batch = images.shape[0]
        n_cells = self.grid[0] * self.grid[1]
        if self.nine_part:
            layouts = [sample_nine_part_layout(self.generator) for _ in range(batch)]
            mappings = torch.tensor([lay.permutation.mapping for lay in layouts], dtype=torch.long)
            masked = torch.tensor([lay.blacked_cell for lay in layouts], dtype=torch.long)
            return make_puzzle_batch(images, mappings, self.grid, masked, MaskMode.INPAINT)

        index = torch.randint(len(self.train_mappings), (batch,), generator=self.generator)
        mappings = self.train_mappings[index]
        masked = None
        if self.mask_mode != MaskMode.NONE:
            masked = torch.randint(n_cells, (batch,), generator=self.generator)
        return make_puzzle_batch(images, mappings, self.grid, masked, self.mask_mode)

    def _abort(self, what: str, value: float, batch_index: int) -> None:
        where = str(self.last_checkpoint) if self.last_checkpoint else "none saved yet"
        message = (
            f"non-finite {what} ({value}) at epoch {self.epoch + 1}, batch {batch_index}; "
            f"lr_unet={self.lr_unet:.3g}, last good checkpoint: {where}"
        )
        self.logger.error(message)
        raise NonFiniteLossError(message)

    def train_step(self, images: torch.Tensor, batch_index: int = 0) -> Dict[str, float]:
        cfg = self.cfg
        images = images.to(self.device)
        puzzled = self.sample_puzzles(images)
        perturbed = perturb(
            self.unet, puzzled, cfg.attack, original=images, generator=self.generator
        )

        output = self.unet(perturbed)
        loss_rec = reconstruction_loss(output, images)
        if cfg.lambda_adv > 0:
            _, real_features = self.disc(images)
            _, fake_features = self.disc(output)
            loss_adv = adversarial_feature_loss(real_features.detach(), fake_features.mean(dim=0))
        else:
            loss_adv = torch.zeros((), device=self.device)
        loss = total_loss(loss_rec, loss_adv, cfg.lambda_adv)
        if not torch.isfinite(loss):
            self._abort("generator loss", float(loss.item()), batch_index)

        self.opt_unet.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_unet.step()

        step = {"loss_rec": float(loss_rec.item()), "loss_adv": float(loss_adv.item())}
        if cfg.lambda_adv > 0:
            loss_disc = discriminator_step(self.disc, self.opt_disc, images, output)
            if not math.isfinite(loss_disc):
                self._abort("discriminator loss", loss_disc, batch_index)
            step["loss_disc"] = loss_disc
        return step

    def train_epoch(self, images: torch.Tensor) -> EpochRecord:
        """One shuffled pass over normal images; steps the plateau schedulers on the epoch loss."""
        n = images.shape[0]
        if n == 0:
            raise TrainingError("training data is empty")
        self.unet.train()
        self.disc.train()
        order = torch.randperm(n, generator=self.generator)
        totals = _EpochTotals()
        for batch_index, start in enumerate(range(0, n, self.cfg.batch_size)):
            batch = images[order[start:start + self.cfg.batch_size]]
            step = self.train_step(batch, batch_index)
            size = batch.shape[0]
            totals.rec += step["loss_rec"] * size
            totals.adv += step["loss_adv"] * size
            totals.samples += size
            if "loss_disc" in step:
                totals.disc += step["loss_disc"]
                totals.disc_batches += 1

        self.epoch += 1
        loss_rec = totals.rec / totals.samples
        loss_adv = totals.adv / totals.samples
        loss_total = float(total_loss(loss_rec, loss_adv, self.cfg.lambda_adv))
        record = EpochRecord(
            epoch=self.epoch,
            loss_rec=loss_rec,
            loss_adv=loss_adv,
            loss_total=loss_total,
            loss_disc=totals.disc / totals.disc_batches if totals.disc_batches else None,
            lr_unet=self.lr_unet,
            lr_disc=self.lr_disc,
        )
        self.step_schedulers(loss_total)
        return record

    def step_schedulers(self, loss_total: float) -> None:
        before = self.lr_unet
        self.sched_unet.step(loss_total)
        self.sched_disc.step(loss_total)
        if self.lr_unet < before:
            self.logger.info(f"Plateau reached: lr_unet {before:.3g} -> {self.lr_unet:.3g}")

    def normalizers(self, images: torch.Tensor) -> NormalizerTable:
        self.unet.eval()
        return compute_normalizers(
            self.unet, images.to(self.device), self.score_perms, self.cfg.score_batch_size
        )

    def checkpoint(self, normalizers: Optional[NormalizerTable] = None) -> Checkpoint:
        return Checkpoint(
            unet=self.unet,
            discriminator=self.disc,
            train_config=self.cfg,
            epoch=self.epoch,
            permutations=list(self.score_perms),
            normalizers=normalizers,
        )

    def save(self, path: Union[str, Path], normalizers: Optional[NormalizerTable] = None) -> Path:
        self.last_checkpoint = save_checkpoint(self.checkpoint(normalizers), path)
        return self.last_checkpoint


@dataclass
class FitResult:
    checkpoint: Checkpoint
    records: List[EpochRecord] = field(default_factory=list)
    stability: Optional[Dict[str, Dict[str, float]]] = None


def stability_stats(
    records: List[EpochRecord], window: int = 20
) -> Optional[Dict[str, Dict[str, float]]]:
    """Mean and standard deviation of each AUROC column over the final ``window`` epochs."""
    stats: Dict[str, Dict[str, float]] = {}
    for column in ("auroc_min", "auroc_max", "auroc_avg"):
        values = [getattr(r, column) for r in records if getattr(r, column) is not None]
        if not values:
            continue
        tail = np.asarray(values[-window:], dtype=np.float64)
        stats[column] = {"mean": float(tail.mean()), "std": float(tail.std()), "n": int(tail.size)}
    return stats or None


def records_to_frame(records: List[EpochRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in records])


def write_epoch_csv(records: List[EpochRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_to_frame(records).to_csv(path, index=False)
    return path


def fit(
    cfg: TrainConfig,
    train_data: torch.Tensor,
    val_data: Optional[torch.Tensor] = None,
    evaluator: Optional[EpochEvaluator] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    device: Union[str, torch.device] = "cpu",
) -> FitResult:
    """Train for ``cfg.epochs`` epochs, then freeze validation normalizers into the checkpoint.

    ``evaluator`` is called every ``cfg.eval_every`` epochs with the U-Net and provisional
    normalizers and returns AUROC columns for the epoch record.
    """
    if train_data is None or train_data.shape[0] == 0:
        raise TrainingError("training data is empty")
    if train_data.dim() != 4:
        raise TrainingError(f"expected [N, C, H, W] training data, got {tuple(train_data.shape)}")
    if tuple(train_data.shape[-2:]) != tuple(cfg.puzzle.canvas_size):
        raise TrainingError(
            f"training images are {tuple(train_data.shape[-2:])}, "
            f"puzzle canvas is {tuple(cfg.puzzle.canvas_size)}"
        )
    norm_data = val_data
    if val_data is None or val_data.shape[0] == 0:
        logger.warning("Validation set is empty; normalizers fall back to the training set")
        norm_data = train_data

    trainer = PuzzleTrainer(cfg, channels=train_data.shape[1], device=device)
    logger.info(
        f"Training on {train_data.shape[0]} images for {cfg.epochs} epochs "
        f"(K={len(trainer.score_perms)}, mask={trainer.mask_mode.value}, "
        f"lambda={cfg.lambda_adv}, eps={cfg.attack.epsilon})"
    )

    records: List[EpochRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        record = trainer.train_epoch(train_data)
        if evaluator is not None and epoch % cfg.eval_every == 0:
            aurocs = evaluator(trainer.unet, trainer.normalizers(norm_data))
            record = record.model_copy(update=aurocs)
        records.append(record)
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: rec={record.loss_rec:.4f} adv={record.loss_adv:.4f} "
            f"total={record.loss_total:.4f} lr={record.lr_unet:.3g}"
            + (f" auroc_avg={record.auroc_avg:.4f}" if record.auroc_avg is not None else "")
        )
        if metrics_path is not None:
            write_epoch_csv(records, metrics_path)
        if checkpoint_path is not None:
            trainer.save(checkpoint_path)

    normalizers = trainer.normalizers(norm_data)
    if checkpoint_path is not None:
        trainer.save(checkpoint_path, normalizers)
    stability = stability_stats(records, cfg.stability_window)
    if stability:
        for column, stats in stability.items():
            logger.info(
                f"{column} over last {stats['n']} epochs: "
                f"{stats['mean']:.4f} +/- {stats['std']:.4f}"
            )
    return FitResult(trainer.checkpoint(normalizers), records, stability)
