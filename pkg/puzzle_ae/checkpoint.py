"""
Checkpoint archives and run manifests.

A checkpoint is one ``torch.save`` archive holding only plain containers and tensors, so it loads
with ``weights_only=True``::

    format_version   int, currently 1
    architecture     {"unet": {...}, "discriminator": {...}}
    train_config     TrainConfig as JSON-compatible dict
    epoch            last completed epoch
    permutations     list of mappings (scoring set)
    permutation_hash sha256 prefix of the scoring set
    normalizers      list of per-permutation validation means, or None
    unet_state       state dict
    disc_state       state dict, or None
"""
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch

from .models import RunManifest, TrainConfig
from .networks import Discriminator, ReconstructionNet
from .puzzle_engine import GridPermutation, permutation_set_hash
from .scoring import NormalizerTable

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Unreadable or incompatible checkpoint archive."""
    pass


@dataclass
class Checkpoint:
    unet: ReconstructionNet
    discriminator: Optional[Discriminator]
    train_config: TrainConfig
    epoch: int
    permutations: List[GridPermutation]
    normalizers: Optional[NormalizerTable]

    @property
    def permutation_hash(self) -> str:
        return permutation_set_hash(self.permutations)

    @property
    def image_size(self) -> int:
        return self.train_config.puzzle.canvas_size[0]


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    disc = checkpoint.discriminator
    archive = {
        "format_version": FORMAT_VERSION,
        "architecture": {
            "unet": checkpoint.unet.architecture(),
            "discriminator": disc.architecture() if disc is not None else None,
        },
        "train_config": checkpoint.train_config.model_dump(mode="json"),
        "epoch": checkpoint.epoch,
        "permutations": [p.to_list() for p in checkpoint.permutations],
        "permutation_hash": checkpoint.permutation_hash,
        "normalizers": (
            checkpoint.normalizers.to_list() if checkpoint.normalizers is not None else None
        ),
        "unet_state": checkpoint.unet.state_dict(),
        "disc_state": disc.state_dict() if disc is not None else None,
    }
    fd, temp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    torch.save(archive, temp_name)
    os.replace(temp_name, path)
    logger.info(f"Saved checkpoint (epoch {checkpoint.epoch}) to {path}")
    return path


def load_checkpoint(path: Union[str, Path], device: Union[str, torch.device] = "cpu") -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location=device, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"failed to read checkpoint {path}: {e}") from e

    version = archive.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version} in {path}")

    train_config = TrainConfig.model_validate(archive["train_config"])
    grid = train_config.puzzle.grid
    permutations = [GridPermutation(grid, tuple(m)) for m in archive["permutations"]]
    if permutation_set_hash(permutations) != archive.get("permutation_hash"):
        raise CheckpointError(f"permutation hash mismatch in {path}")

    arch = archive["architecture"]
    unet = ReconstructionNet(**arch["unet"])
    unet.load_state_dict(archive["unet_state"])
    unet.to(device).eval()

    discriminator = None
    if arch.get("discriminator") and archive.get("disc_state") is not None:
        discriminator = Discriminator(**arch["discriminator"])
        discriminator.load_state_dict(archive["disc_state"])
        discriminator.to(device).eval()

    normalizers = None
    if archive.get("normalizers") is not None:
        normalizers = NormalizerTable.from_list(archive["normalizers"])

    logger.info(f"Loaded checkpoint {path} (epoch {archive['epoch']}, K={len(permutations)})")
    return Checkpoint(
        unet=unet,
        discriminator=discriminator,
        train_config=train_config,
        epoch=int(archive["epoch"]),
        permutations=permutations,
        normalizers=normalizers,
    )


def write_json_atomic(data: Dict, path: Union[str, Path]) -> Path:
    """Write JSON through a temp file and ``os.replace``, copying when replace fails."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", dir=path.parent, delete=False, suffix=".tmp") as tf:
        json.dump(data, tf, indent=2)
        temp_name = tf.name
    try:
        os.replace(temp_name, path)
    except OSError:
        # mounted volumes may refuse the rename
        shutil.copy2(temp_name, path)
        try:
            os.unlink(temp_name)
        except OSError:
            pass
    return path


def write_manifest(manifest: RunManifest, path: Union[str, Path]) -> Path:
    path = write_json_atomic(manifest.model_dump(mode="json"), path)
    logger.info(f"Wrote run manifest to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> RunManifest:
    try:
        with open(path, "r") as f:
            return RunManifest.model_validate(json.load(f))
    except (OSError, json.JSONDecodeError, ValueError) as e:
        raise CheckpointError(f"failed to read manifest {path}: {e}") from e
