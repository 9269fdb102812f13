"""Shared fixtures: tiny networks and configs that train in seconds on a CPU."""
import pytest
import torch

from puzzle_ae.data import LabeledImages
from puzzle_ae.models import AttackConfig, PuzzleConfig, TrainConfig


def tiny_train_config(**overrides) -> TrainConfig:
    """16x16 canvas, depth-2 U-Net with 4 base channels."""
    values = dict(
        batch_size=8,
        epochs=2,
        depth=2,
        base_channels=4,
        disc_channels=4,
        score_batch_size=16,
        puzzle=PuzzleConfig(canvas_size=(16, 16)),
        attack=AttackConfig(epsilon=0.05, alpha=0.05),
    )
    values.update(overrides)
    return TrainConfig(**values)


def toy_labeled_images(n_per_class=8, classes=(0, 1), channels=1, size=16, seed=0):
    generator = torch.Generator().manual_seed(seed)
    images, labels = [], []
    for label in classes:
        base = 0.2 + 0.15 * label
        batch = base + 0.1 * torch.rand((n_per_class, channels, size, size), generator=generator)
        images.append(batch.clamp(0.0, 1.0))
        labels.extend([label] * n_per_class)
    return LabeledImages(torch.cat(images), torch.tensor(labels))


@pytest.fixture
def tiny_config():
    return tiny_train_config()


@pytest.fixture
def toy_images():
    """16 normal single-channel 16x16 images in [0, 1]."""
    generator = torch.Generator().manual_seed(0)
    return torch.rand((16, 1, 16, 16), generator=generator)


@pytest.fixture
def constant_cells():
    """1x4x4 image whose four 2x2 cells hold the constants 0.1, 0.3, 0.6 and 0.9."""
    image = torch.zeros((1, 4, 4))
    image[:, :2, :2] = 0.1
    image[:, :2, 2:] = 0.3
    image[:, 2:, :2] = 0.6
    image[:, 2:, 2:] = 0.9
    return image


@pytest.fixture
def labeled_toy():
    return toy_labeled_images()
