"""
Anomaly scores from multi-permutation reconstruction error.

For a test image x and each permutation P_i the raw score is ``||U(f_Pi(x)) - x||_2``; it is
divided by the mean raw score of permutation i over normal validation data and the K normalized
scores are reduced with min, max or avg.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from .models import Aggregation
from .puzzle_engine import GridPermutation, apply_permutation

logger = logging.getLogger(__name__)

TOY_IMAGE_SIZE = 32

Model = Callable[[torch.Tensor], torch.Tensor]


class ScoringError(ValueError):
    """Invalid scoring inputs or degenerate normalizers."""
    pass


@dataclass(frozen=True)
class NormalizerTable:
    """Per-permutation mean validation error, indexed like the permutation set."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ScoringError(f"normalizers must be a non-empty vector, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ScoringError(f"normalizers must be finite and positive, got {values.tolist()}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def to_list(self) -> List[float]:
        return [float(v) for v in self.values]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "NormalizerTable":
        return cls(np.asarray(values, dtype=np.float64))

    @classmethod
    def ones(cls, k: int) -> "NormalizerTable":
        return cls(np.ones(k, dtype=np.float64))


@dataclass
class ScoreTable:
    """Raw and normalized per-permutation scores with their aggregates, one row per sample."""

    raw: np.ndarray
    normalized: np.ndarray
    sample_ids: List[str] = field(default_factory=list)
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.raw = np.atleast_2d(np.asarray(self.raw, dtype=np.float64))
        self.normalized = np.atleast_2d(np.asarray(self.normalized, dtype=np.float64))
        if self.raw.shape != self.normalized.shape:
            raise ScoringError(f"raw {self.raw.shape} vs normalized {self.normalized.shape}")
        if not self.sample_ids:
            self.sample_ids = [str(i) for i in range(self.raw.shape[0])]
        elif len(self.sample_ids) != self.raw.shape[0]:
            raise ScoringError(
                f"{len(self.sample_ids)} sample ids for {self.raw.shape[0]} score rows"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return self.raw.shape[0]

    @property
    def s_min(self) -> np.ndarray:
        return self.normalized.min(axis=1)

    @property
    def s_max(self) -> np.ndarray:
        return self.normalized.max(axis=1)

    @property
    def s_avg(self) -> np.ndarray:
        return self.normalized.mean(axis=1)

    def aggregate(self, aggregation: Union[Aggregation, str]) -> np.ndarray:
        aggregation = Aggregation(aggregation)
        if aggregation == Aggregation.MIN:
            return self.s_min
        if aggregation == Aggregation.MAX:
            return self.s_max
        return self.s_avg

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"sample_id": self.sample_ids})
        if self.labels is not None:
            frame["label"] = self.labels
        frame["S_min"] = self.s_min
        frame["S_max"] = self.s_max
        frame["S_avg"] = self.s_avg
        for i in range(self.normalized.shape[1]):
            frame[f"S_norm_{i}"] = self.normalized[:, i]
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)


def default_aggregation(image_size: int) -> Aggregation:
    """max for toy-sized images, avg for larger real-world images."""
    return Aggregation.MAX if image_size <= TOY_IMAGE_SIZE else Aggregation.AVG


def _per_sample_l2(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if output.shape != target.shape:
        raise ScoringError(f"shape mismatch: {tuple(output.shape)} vs {tuple(target.shape)}")
    return (output - target).flatten(start_dim=1).double().norm(p=2, dim=1)


def model_device(model: Model) -> Optional[torch.device]:
    if isinstance(model, torch.nn.Module):
        for param in model.parameters():
            return param.device
    return None


@torch.no_grad()
def permutation_scores(
    model: Model,
    images: torch.Tensor,
    perms: Sequence[GridPermutation],
    batch_size: int = 256,
) -> np.ndarray:
    """Raw scores as an [N, K] float64 array; no masking is applied at test time."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.shape[0] == 0:
        return np.zeros((0, len(perms)), dtype=np.float64)
    device = model_device(model)
    scores = np.zeros((images.shape[0], len(perms)), dtype=np.float64)
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        if device is not None:
            batch = batch.to(device)
        for k, perm in enumerate(perms):
            output = model(apply_permutation(batch, perm))
            scores[start:start + batch.shape[0], k] = _per_sample_l2(output, batch).cpu().numpy()
    return scores


def per_permutation_score(model: Model, x: torch.Tensor, perm: GridPermutation) -> float:
    """``||U(f_P(x)) - x||_2`` for a single [C, H, W] image."""
    if x.dim() != 3:
        raise ScoringError(f"expected a single [C, H, W] image, got shape {tuple(x.shape)}")
    return float(permutation_scores(model, x, [perm])[0, 0])


def compute_normalizers(
    model: Model,
    validation_set: torch.Tensor,
    perms: Sequence[GridPermutation],
    batch_size: int = 256,
) -> NormalizerTable:
    """Streaming mean of raw scores over normal validation images, per permutation."""
    n = 0 if validation_set is None else int(validation_set.shape[0])
    if n == 0:
        raise ScoringError("validation set is empty; normalizers cannot be computed")
    totals = np.zeros(len(perms), dtype=np.float64)
    for start in range(0, n, batch_size):
        batch = validation_set[start:start + batch_size]
        totals += permutation_scores(model, batch, perms, batch_size).sum(axis=0)
    means = totals / n
    if np.any(means <= 0) or not np.all(np.isfinite(means)):
        degenerate = [i for i, m in enumerate(means) if not (math.isfinite(m) and m > 0)]
        logger.error(f"Degenerate normalizers for permutations {degenerate}: {means.tolist()}")
        raise ScoringError(
            f"validation mean error is zero or non-finite for permutations {degenerate}"
        )
    logger.info(f"Computed normalizers over {n} validation images for K={len(perms)}")
    return NormalizerTable(means)


def normalize_scores(raw: np.ndarray, normalizers: NormalizerTable) -> np.ndarray:
    raw = np.atleast_2d(raw)
    if raw.shape[1] != len(normalizers):
        raise ScoringError(
            f"normalizer table has {len(normalizers)} entries, scores have {raw.shape[1]}"
        )
    return raw / normalizers.values[None, :]


def score_images(
    model: Model,
    images: torch.Tensor,
    perms: Sequence[GridPermutation],
    normalizers: NormalizerTable,
    sample_ids: Optional[Sequence[str]] = None,
    labels: Optional[np.ndarray] = None,
    batch_size: int = 256,
) -> ScoreTable:
    if len(normalizers) != len(perms):
        raise ScoringError(
            f"normalizer table has {len(normalizers)} entries for {len(perms)} permutations"
        )
    raw = permutation_scores(model, images, perms, batch_size)
    return ScoreTable(
        raw=raw,
        normalized=normalize_scores(raw, normalizers),
        sample_ids=list(sample_ids) if sample_ids is not None else [],
        labels=labels,
    )


def score_sample(
    model: Model,
    x: torch.Tensor,
    perms: Sequence[GridPermutation],
    normalizers: NormalizerTable,
    aggregation: Optional[Union[Aggregation, str]] = None,
) -> Dict[str, Union[float, List[float]]]:
    """One ScoreTable row for a single image, plus the requested aggregate as ``score``.

    Without ``aggregation`` the default for the image size is used.
    """
    if aggregation is None:
        aggregation = default_aggregation(x.shape[-1])
    table = score_images(model, x.unsqueeze(0) if x.dim() == 3 else x, perms, normalizers)
    return {
        "raw": table.raw[0].tolist(),
        "normalized": table.normalized[0].tolist(),
        "s_min": float(table.s_min[0]),
        "s_max": float(table.s_max[0]),
        "s_avg": float(table.s_avg[0]),
        "score": float(table.aggregate(aggregation)[0]),
    }
