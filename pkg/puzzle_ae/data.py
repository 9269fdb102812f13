"""
Dataset ingestion: IDX pairs, image folders and a seeded synthetic set, all brought to [0, 1]
float tensors on a fixed canvas.
"""
import gzip
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .models import DatasetFormat, DatasetSpec, LabelRule, ResizeMode
from .puzzle_engine import LUMA_WEIGHTS

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
IDX_PREFIXES = {"train": "train", "test": "t10k"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


class DatasetError(ValueError):
    """Unreadable, malformed or empty dataset."""
    pass


@dataclass
class LabeledImages:
    """Images [N, C, H, W] in [0, 1] with integer class labels and stable sample ids."""

    images: torch.Tensor
    labels: torch.Tensor
    sample_ids: List[str] = field(default_factory=list)
    class_names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        if self.images.dim() != 4:
            raise DatasetError(f"expected [N, C, H, W] images, got {tuple(self.images.shape)}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(self.images.shape[0])]

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def channels(self) -> int:
        return int(self.images.shape[1])

    def subset(self, indices: Union[Sequence[int], torch.Tensor]) -> "LabeledImages":
        index = torch.as_tensor(indices, dtype=torch.long)
        return LabeledImages(
            images=self.images[index],
            labels=self.labels[index],
            sample_ids=[self.sample_ids[i] for i in index.tolist()],
            class_names=dict(self.class_names),
        )

    def indices_of(self, label: int) -> torch.Tensor:
        return torch.nonzero(self.labels == label, as_tuple=False).flatten()

    def with_images(self, images: torch.Tensor) -> "LabeledImages":
        return LabeledImages(
            images, self.labels.clone(), list(self.sample_ids), dict(self.class_names)
        )

    def classes(self) -> List[int]:
        return sorted(set(self.labels.tolist()))


def concat(parts: Sequence[LabeledImages]) -> LabeledImages:
    if not parts:
        raise DatasetError("nothing to concatenate")
    class_names: Dict[int, str] = {}
    for part in parts:
        class_names.update(part.class_names)
    return LabeledImages(
        images=torch.cat([p.images for p in parts]),
        labels=torch.cat([p.labels for p in parts]),
        sample_ids=[sid for p in parts for sid in p.sample_ids],
        class_names=class_names,
    )


def to_grayscale(images: torch.Tensor) -> torch.Tensor:
    """Luma conversion of [..., 3, H, W] images; single-channel input passes through."""
    channels = images.shape[-3]
    if channels == 1:
        return images.clone()
    if channels != 3:
        raise DatasetError(f"cannot convert {channels}-channel images to grayscale")
    weights = torch.tensor(LUMA_WEIGHTS, dtype=images.dtype, device=images.device)
    gray = (images * weights[:, None, None]).sum(dim=-3, keepdim=True)
    return gray.clamp(0.0, 1.0)


def pad_to_canvas(images: torch.Tensor, canvas_size: Tuple[int, int]) -> torch.Tensor:
    """Centered zero padding; the extra pixel of an odd margin goes to the bottom/right."""
    height, width = images.shape[-2:]
    target_h, target_w = canvas_size
    if height > target_h or width > target_w:
        raise DatasetError(
            f"cannot pad {height}x{width} images onto a {target_h}x{target_w} canvas"
        )
    top = (target_h - height) // 2
    left = (target_w - width) // 2
    return F.pad(images, (left, target_w - width - left, top, target_h - height - top))


def resize_to_canvas(images: torch.Tensor, canvas_size: Tuple[int, int]) -> torch.Tensor:
    if tuple(images.shape[-2:]) == tuple(canvas_size):
        return images
    squeeze = images.dim() == 3
    batch = images.unsqueeze(0) if squeeze else images
    out = F.interpolate(batch, size=tuple(canvas_size), mode="bilinear", align_corners=False)
    out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out


def fit_to_canvas(
    images: torch.Tensor, canvas_size: Tuple[int, int], mode: ResizeMode = ResizeMode.RESIZE
) -> torch.Tensor:
    if ResizeMode(mode) == ResizeMode.PAD:
        height, width = images.shape[-2:]
        if height <= canvas_size[0] and width <= canvas_size[1]:
            return pad_to_canvas(images, canvas_size)
        logger.warning(f"Images {height}x{width} exceed canvas {canvas_size}; resizing instead")
    return resize_to_canvas(images, canvas_size)


def _enforce_channels(images: torch.Tensor, channels: int) -> torch.Tensor:
    have = images.shape[1]
    if have == channels:
        return images
    if channels == 1:
        return to_grayscale(images)
    if have == 1 and channels == 3:
        return images.repeat(1, 3, 1, 1)
    raise DatasetError(f"cannot convert {have}-channel images to {channels} channels")


def _open_maybe_gzip(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except OSError as e:
        raise DatasetError(f"failed to read {path}: {e}") from e


def _find_idx_file(root: Path, stem: str) -> Path:
    for candidate in (root / stem, root / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetError(f"IDX file {stem}[.gz] not found under {root}")


def read_idx_images(path: Path) -> np.ndarray:
    raw = _open_maybe_gzip(path)
    if len(raw) < 16:
        raise DatasetError(f"{path} is too short for an IDX image header")
    magic, count, rows, cols = np.frombuffer(raw[:16], dtype=">i4")
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"bad magic number {magic} in {path} (expected {IDX_IMAGES_MAGIC})")
    data = np.frombuffer(raw[16:], dtype=np.uint8)
    if data.size != count * rows * cols:
        raise DatasetError(f"{path} holds {data.size} bytes, header promises {count}x{rows}x{cols}")
    return data.reshape(count, rows, cols)


def read_idx_labels(path: Path) -> np.ndarray:
    raw = _open_maybe_gzip(path)
    if len(raw) < 8:
        raise DatasetError(f"{path} is too short for an IDX label header")
    magic, count = np.frombuffer(raw[:8], dtype=">i4")
    if magic != IDX_LABELS_MAGIC:
        raise DatasetError(f"bad magic number {magic} in {path} (expected {IDX_LABELS_MAGIC})")
    labels = np.frombuffer(raw[8:], dtype=np.uint8)
    if labels.size != count:
        raise DatasetError(f"{path} holds {labels.size} labels, header promises {count}")
    return labels.astype(np.int64)


def _load_idx_pair(spec: DatasetSpec) -> LabeledImages:
    prefix = IDX_PREFIXES.get(spec.split, spec.split)
    images = read_idx_images(_find_idx_file(spec.root, f"{prefix}-images-idx3-ubyte"))
    labels = read_idx_labels(_find_idx_file(spec.root, f"{prefix}-labels-idx1-ubyte"))
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"{images.shape[0]} images vs {labels.shape[0]} labels in {spec.root}")
    tensor = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    return LabeledImages(
        images=tensor,
        labels=torch.from_numpy(labels),
        sample_ids=[f"{spec.split}/{i}" for i in range(images.shape[0])],
    )


def _decode_image(path: Path, channels: int) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            array = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise DatasetError(f"unreadable image {path}: {e}") from e
    if array.ndim == 2:
        array = array[None, :, :]
    else:
        array = array.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(array))


def _image_files(directory: Path) -> List[Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def _folder_entries(base: Path) -> Tuple[List[Tuple[Path, int]], Dict[int, str]]:
    class_dirs = sorted(d for d in base.iterdir() if d.is_dir())
    if not class_dirs:
        raise DatasetError(f"no class folders under {base}")
    numeric = all(d.name.isdigit() for d in class_dirs)
    entries: List[Tuple[Path, int]] = []
    class_names: Dict[int, str] = {}
    for index, directory in enumerate(class_dirs):
        label = int(directory.name) if numeric else index
        files = _image_files(directory)
        if not files:
            raise DatasetError(f"class folder {directory} contains no images")
        class_names[label] = directory.name
        entries.extend((f, label) for f in files)
    return entries, class_names


def _label_file_entries(base: Path, label_file: Path) -> List[Tuple[Path, int]]:
    try:
        frame = pd.read_csv(label_file)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetError(f"failed to read label file {label_file}: {e}") from e
    missing = {"filename", "label"} - set(frame.columns)
    if missing:
        raise DatasetError(f"label file {label_file} lacks columns {sorted(missing)}")
    if frame.empty:
        raise DatasetError(f"label file {label_file} has no rows")
    return [(base / str(row.filename), int(row.label)) for row in frame.itertuples(index=False)]


def _load_image_folder(spec: DatasetSpec) -> LabeledImages:
    base = spec.root / spec.split if (spec.root / spec.split).is_dir() else spec.root
    if spec.label_rule == LabelRule.LABEL_FILE:
        entries = _label_file_entries(base, spec.label_file)
        class_names = {label: str(label) for _, label in entries}
    else:
        entries, class_names = _folder_entries(base)

    images = []
    for path, _ in entries:
        decoded = _decode_image(path, spec.channels)
        images.append(fit_to_canvas(decoded, spec.canvas_size, spec.resize_mode))
    return LabeledImages(
        images=torch.stack(images),
        labels=torch.tensor([label for _, label in entries], dtype=torch.long),
        sample_ids=[str(path.relative_to(base)) for path, _ in entries],
        class_names=class_names,
    )


def make_synthetic(spec: DatasetSpec) -> LabeledImages:
    """Seeded images whose class sets the stripe frequency and orientation, plus mild noise."""
    height, width = spec.canvas_size
    generator = torch.Generator().manual_seed(spec.seed if spec.split == "train" else spec.seed + 1)
    labels = torch.arange(spec.num_samples) % spec.num_classes
    ys = torch.linspace(0.0, 1.0, height)[:, None].expand(height, width)
    xs = torch.linspace(0.0, 1.0, width)[None, :].expand(height, width)
    images = []
    for label in labels.tolist():
        frequency = 1 + label // 2
        coord = ys if label % 2 == 0 else xs
        phase = float(torch.rand(1, generator=generator)) * 0.5
        pattern = 0.5 + 0.4 * torch.sin(2 * np.pi * (frequency * coord + phase))
        noise = torch.randn((spec.channels, height, width), generator=generator) * 0.05
        images.append((pattern.expand(spec.channels, height, width) + noise).clamp(0.0, 1.0))
    return LabeledImages(
        images=torch.stack(images),
        labels=labels,
        sample_ids=[f"synthetic/{spec.split}/{i}" for i in range(spec.num_samples)],
        class_names={c: f"class_{c}" for c in range(spec.num_classes)},
    )


def load_dataset(spec: DatasetSpec) -> LabeledImages:
    """Decode, bring onto the canvas, scale to [0, 1] and enforce the channel count."""
    if spec.format == DatasetFormat.SYNTHETIC:
        data = make_synthetic(spec)
    else:
        if not spec.root.exists():
            raise DatasetError(f"dataset root does not exist: {spec.root}")
        if spec.format == DatasetFormat.IDX_PAIR:
            data = _load_idx_pair(spec)
        else:
            data = _load_image_folder(spec)

    images = _enforce_channels(data.images, spec.channels)
    images = fit_to_canvas(images, spec.canvas_size, spec.resize_mode)
    data = data.with_images(images.contiguous())
    if len(data) == 0:
        raise DatasetError(f"dataset {spec.root} ({spec.split}) is empty")
    logger.info(
        f"Loaded {len(data)} {spec.format.value} images from {spec.root} ({spec.split}), "
        f"{data.channels}x{spec.canvas_size[0]}x{spec.canvas_size[1]}, "
        f"{len(data.classes())} classes"
    )
    return data


def binary_labels(labels: torch.Tensor, normal_class: int) -> np.ndarray:
    """1 for anomalous (any class other than ``normal_class``), 0 for normal."""
    return (torch.as_tensor(labels) != normal_class).long().numpy()
