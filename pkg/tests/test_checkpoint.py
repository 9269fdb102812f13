import json

import pytest
import torch

from puzzle_ae.checkpoint import (
    FORMAT_VERSION,
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    write_json_atomic,
    write_manifest,
)
from puzzle_ae.models import PermMode, RunManifest
from puzzle_ae.networks import build_discriminator, build_reconstruction_net
from puzzle_ae.puzzle_engine import enumerate_permutations
from puzzle_ae.scoring import NormalizerTable
from tests.conftest import tiny_train_config


@pytest.fixture
def checkpoint():
    cfg = tiny_train_config()
    perms = enumerate_permutations((2, 2), PermMode.AT_LEAST_TWO)
    return Checkpoint(
        unet=build_reconstruction_net(1, 16, depth=2, base_channels=4, seed=0),
        discriminator=build_discriminator(1, 16, base_channels=4, seed=1),
        train_config=cfg,
        epoch=3,
        permutations=perms,
        normalizers=NormalizerTable.from_list([1.0 + i for i in range(len(perms))]),
    )


class TestCheckpointArchive:
    """Test saving and loading trained models."""

    def test_save_and_load(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "ckpt" / "model.pt")
        loaded = load_checkpoint(path)
        assert loaded.epoch == 3
        assert loaded.train_config == checkpoint.train_config
        assert loaded.permutations == checkpoint.permutations
        assert loaded.normalizers.to_list() == checkpoint.normalizers.to_list()
        assert loaded.permutation_hash == checkpoint.permutation_hash
        assert loaded.image_size == 16
        x = torch.rand((2, 1, 16, 16))
        with torch.no_grad():
            assert torch.equal(loaded.unet(x), checkpoint.unet.eval()(x))
        assert not loaded.unet.training

    def test_without_normalizers_or_discriminator(self, checkpoint, tmp_path):
        checkpoint.normalizers = None
        checkpoint.discriminator = None
        loaded = load_checkpoint(save_checkpoint(checkpoint, tmp_path / "model.pt"))
        assert loaded.normalizers is None
        assert loaded.discriminator is None

    def test_no_temp_files_left(self, checkpoint, tmp_path):
        save_checkpoint(checkpoint, tmp_path / "model.pt")
        assert [p.name for p in tmp_path.iterdir()] == ["model.pt"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "missing.pt")

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "model.pt"
        path.write_bytes(b"garbage")
        with pytest.raises(CheckpointError, match="failed to read"):
            load_checkpoint(path)

    def test_format_version_checked(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "model.pt")
        archive = torch.load(path, weights_only=True)
        archive["format_version"] = FORMAT_VERSION + 1
        torch.save(archive, path)
        with pytest.raises(CheckpointError, match="format_version"):
            load_checkpoint(path)

    def test_permutation_hash_checked(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, tmp_path / "model.pt")
        archive = torch.load(path, weights_only=True)
        archive["permutations"] = archive["permutations"][::-1]
        torch.save(archive, path)
        with pytest.raises(CheckpointError, match="hash mismatch"):
            load_checkpoint(path)


class TestManifest:
    """Test run manifest persistence."""

    def test_write_and_read(self, tmp_path):
        manifest = RunManifest(
            command="train",
            config={"normal_class": 1},
            seed=4,
            version="0.1.0",
            outputs={"checkpoint": "checkpoint.pt"},
        )
        path = write_manifest(manifest, tmp_path / "manifest.json")
        assert read_manifest(path) == manifest

    def test_read_invalid(self, tmp_path):
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(CheckpointError):
            read_manifest(path)

    def test_atomic_json_falls_back_to_copy(self, tmp_path, mocker):
        mocker.patch("puzzle_ae.checkpoint.os.replace", side_effect=OSError("cross-device"))
        path = write_json_atomic({"a": 1}, tmp_path / "out.json")
        assert json.loads(path.read_text()) == {"a": 1}
        assert [p.name for p in tmp_path.iterdir()] == ["out.json"]
