"""
Detection metrics, evaluation protocols, test-time attacks and data-efficiency sweeps.

Higher scores mean "more anomalous" everywhere; label 1 marks an anomalous sample.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
import torchvision.transforms.functional as TF  # noqa: E402
from scipy.stats import rankdata  # noqa: E402
from sklearn.metrics import roc_curve  # noqa: E402

from .adversarial import PerturbationError  # noqa: E402
from .data import LabeledImages, binary_labels  # noqa: E402
from .models import Aggregation, AttackVariant, EpochRecord, EvalReport, TrainConfig  # noqa: E402
from .networks import ReconstructionNet  # noqa: E402
from .puzzle_engine import GridPermutation, apply_permutation, invert_permutation  # noqa: E402
from .scoring import Model, NormalizerTable, ScoreTable, model_device, score_images  # noqa: E402
from .training import fit, stability_stats  # noqa: E402,F401

logger = logging.getLogger(__name__)

DEFAULT_TPR_POINTS = (0.99, 0.995)
DEFAULT_ATTACK_EPSILONS = (0.05, 0.1, 0.2)
PROTOCOL1_TRAIN_SHARE = 0.8
PROTOCOL1_REPEATS = 30
MEDICAL_TEST_NORMALS = 10
ZOOM_SCALE = (0.8, 1.0)
ZOOM_TARGET = 800


class EvaluationError(ValueError):
    """Metric or protocol inputs that cannot produce a result."""
    pass


@dataclass
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.scores.shape != self.labels.shape:
            raise EvaluationError(
                f"{self.scores.size} scores but {self.labels.size} labels"
            )
        if not np.isin(self.labels, (0, 1)).all():
            raise EvaluationError("labels must be binary (1 = anomalous)")

    @property
    def n_anomalous(self) -> int:
        return int(self.labels.sum())

    @property
    def n_normal(self) -> int:
        return int(self.labels.size - self.labels.sum())

    def require_both_classes(self) -> None:
        if self.n_anomalous == 0 or self.n_normal == 0:
            raise EvaluationError(
                f"need both classes, got {self.n_normal} normal and {self.n_anomalous} anomalous"
            )


def auroc(ls: LabeledScores) -> float:
    """Mann-Whitney statistic with average ranks for ties."""
    ls.require_both_classes()
    ranks = rankdata(ls.scores, method="average")
    n_anom, n_norm = ls.n_anomalous, ls.n_normal
    u_stat = ranks[ls.labels == 1].sum() - n_anom * (n_anom + 1) / 2.0
    return float(u_stat / (n_anom * n_norm))


def fpr_at_tpr(ls: LabeledScores, target_tpr: float) -> float:
    """Smallest FPR among thresholds (anomalous when score >= t) whose TPR reaches the target."""
    ls.require_both_classes()
    if not 0.0 < target_tpr <= 1.0:
        raise EvaluationError(f"target TPR must be in (0, 1], got {target_tpr}")
    fpr, tpr, _ = roc_curve(ls.labels, ls.scores, drop_intermediate=False)
    reached = tpr >= target_tpr - 1e-12
    return float(fpr[reached].min())


def roc_points(ls: LabeledScores) -> pd.DataFrame:
    ls.require_both_classes()
    fpr, tpr, thresholds = roc_curve(ls.labels, ls.scores, drop_intermediate=False)
    return pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": thresholds})


def plot_roc_svg(ls: LabeledScores, path: Union[str, Path], title: str = "ROC") -> Path:
    points = roc_points(ls)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(points["fpr"], points["tpr"], label=f"AUROC = {auroc(ls):.4f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_training_curves(records: List[EpochRecord], path: Union[str, Path]) -> Path:
    """Total loss and, when present, the three per-epoch AUROC curves."""
    frame = pd.DataFrame([r.model_dump() for r in records])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(frame["epoch"], frame["loss_total"], label="total")
    ax_loss.plot(frame["epoch"], frame["loss_rec"], label="rec")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    for column in ("auroc_min", "auroc_max", "auroc_avg"):
        if column in frame and frame[column].notna().any():
            ax_auc.plot(frame["epoch"], frame[column], label=column.split("_")[1])
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("AUROC")
    if ax_auc.lines:
        ax_auc.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def evaluate(
    scores: np.ndarray,
    targets: np.ndarray,
    aggregation: Union[Aggregation, str],
    tpr_points: Sequence[float] = DEFAULT_TPR_POINTS,
) -> EvalReport:
    ls = LabeledScores(scores, targets)
    return EvalReport(
        auroc=auroc(ls),
        fpr_at_tpr={str(point): fpr_at_tpr(ls, point) for point in tpr_points},
        n_normal=ls.n_normal,
        n_anomalous=ls.n_anomalous,
        aggregation=Aggregation(aggregation),
    )


def evaluate_table(
    table: ScoreTable,
    targets: np.ndarray,
    tpr_points: Sequence[float] = DEFAULT_TPR_POINTS,
    aggregations: Sequence[Aggregation] = tuple(Aggregation),
) -> Dict[Aggregation, EvalReport]:
    """One report per aggregation, all from the same scoring pass."""
    return {
        Aggregation(agg): evaluate(table.aggregate(agg), targets, agg, tpr_points)
        for agg in aggregations
    }


def make_epoch_evaluator(
    images: torch.Tensor,
    targets: np.ndarray,
    perms: Sequence[GridPermutation],
    batch_size: int = 256,
) -> Callable[[ReconstructionNet, NormalizerTable], Dict[str, float]]:
    """Callable for ``fit`` that reports min/max/avg AUROC on a labeled set."""

    def _evaluate(unet: ReconstructionNet, normalizers: NormalizerTable) -> Dict[str, float]:
        unet.eval()
        table = score_images(unet, images, perms, normalizers, batch_size=batch_size)
        ls_targets = np.asarray(targets)
        return {
            f"auroc_{agg.value}": auroc(LabeledScores(table.aggregate(agg), ls_targets))
            for agg in Aggregation
        }

    return _evaluate


@dataclass
class ProtocolSplit:
    """Normal-only train/val partitions and a test set with binary targets (1 = anomalous)."""

    train: LabeledImages
    val: LabeledImages
    test: LabeledImages
    targets: np.ndarray


def _empty_like(data: LabeledImages) -> LabeledImages:
    return data.subset([])


def _check_class(data: LabeledImages, normal_class: int) -> torch.Tensor:
    indices = data.indices_of(normal_class)
    if indices.numel() == 0:
        raise EvaluationError(f"normal class {normal_class} is absent from the dataset")
    return indices


def protocol2_split(
    train: LabeledImages,
    test: LabeledImages,
    normal_class: int,
    val_fraction: float = 0.15,
    seed: int = 0,
) -> ProtocolSplit:
    """Normal training images minus a seeded validation share; the full test split."""
    if not 0.0 <= val_fraction < 1.0:
        raise EvaluationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    normal = _check_class(train, normal_class)
    generator = torch.Generator().manual_seed(seed)
    shuffled = normal[torch.randperm(normal.numel(), generator=generator)]
    n_val = int(math.floor(normal.numel() * val_fraction))
    val_idx = shuffled[:n_val].sort().values
    train_idx = shuffled[n_val:].sort().values
    logger.info(
        f"Protocol 2 split for class {normal_class}: train={train_idx.numel()}, "
        f"val={val_idx.numel()}, test={len(test)}"
    )
    return ProtocolSplit(
        train=train.subset(train_idx),
        val=train.subset(val_idx),
        test=test,
        targets=binary_labels(test.labels, normal_class),
    )


def protocol1_split(data: LabeledImages, normal_class: int, seed: int = 0) -> ProtocolSplit:
    """80% of the normal class trains; test pairs the other 20% with as many sampled anomalies."""
    normal = _check_class(data, normal_class)
    anomalies = torch.nonzero(data.labels != normal_class, as_tuple=False).flatten()
    generator = torch.Generator().manual_seed(seed)
    shuffled = normal[torch.randperm(normal.numel(), generator=generator)]
    n_train = int(math.floor(normal.numel() * PROTOCOL1_TRAIN_SHARE))
    test_normals = shuffled[n_train:]
    if anomalies.numel() < test_normals.numel():
        raise EvaluationError(
            f"only {anomalies.numel()} anomalies available for {test_normals.numel()} test normals"
        )
    picked = anomalies[torch.randperm(anomalies.numel(), generator=generator)]
    picked = picked[: test_normals.numel()]
    test_idx = torch.cat([test_normals, picked]).sort().values
    test = data.subset(test_idx)
    return ProtocolSplit(
        train=data.subset(shuffled[:n_train].sort().values),
        val=_empty_like(data),
        test=test,
        targets=binary_labels(test.labels, normal_class),
    )


def run_protocol1(
    data: LabeledImages,
    normal_class: int,
    run_fn: Callable[[ProtocolSplit, int], float],
    repeats: int = PROTOCOL1_REPEATS,
) -> Dict[str, Union[float, List[float]]]:
    """Average ``run_fn(split, seed)`` (an AUROC) over seeds ``0..repeats-1``."""
    if repeats < 1:
        raise EvaluationError("repeats must be positive")
    results = []
    for seed in range(repeats):
        value = float(run_fn(protocol1_split(data, normal_class, seed), seed))
        logger.info(f"Protocol 1 class {normal_class}, seed {seed}: auroc={value:.4f}")
        results.append(value)
    values = np.asarray(results)
    return {"mean": float(values.mean()), "std": float(values.std()), "aurocs": results}


def medical_split(
    data: LabeledImages,
    normal_class: int,
    n_test_normals: int = MEDICAL_TEST_NORMALS,
    seed: int = 0,
) -> ProtocolSplit:
    """Ten random normals plus every anomaly form the test set; the remaining normals train."""
    normal = _check_class(data, normal_class)
    if normal.numel() <= n_test_normals:
        raise EvaluationError(
            f"class {normal_class} has {normal.numel()} images, need more than {n_test_normals}"
        )
    anomalies = torch.nonzero(data.labels != normal_class, as_tuple=False).flatten()
    if anomalies.numel() == 0:
        raise EvaluationError("medical split needs at least one anomalous image")
    generator = torch.Generator().manual_seed(seed)
    shuffled = normal[torch.randperm(normal.numel(), generator=generator)]
    test_idx = torch.cat([shuffled[:n_test_normals], anomalies]).sort().values
    test = data.subset(test_idx)
    return ProtocolSplit(
        train=data.subset(shuffled[n_test_normals:].sort().values),
        val=_empty_like(data),
        test=test,
        targets=binary_labels(test.labels, normal_class),
    )


def _normalized_avg_score(
    model: Model,
    x: torch.Tensor,
    perms: Sequence[GridPermutation],
    normalizers: NormalizerTable,
) -> torch.Tensor:
    """Differentiable per-sample avg of normalized scores, summed over the batch."""
    total = torch.zeros((), dtype=x.dtype, device=x.device)
    for perm, norm in zip(perms, normalizers.values):
        error = (model(apply_permutation(x, perm)) - x).flatten(start_dim=1).norm(p=2, dim=1)
        total = total + (error / float(norm)).sum()
    return total / len(perms)


def attack_normal(
    model: Model,
    x: torch.Tensor,
    variant: Union[AttackVariant, str],
    epsilon: float,
    perms: Sequence[GridPermutation],
    normalizers: Optional[NormalizerTable] = None,
) -> torch.Tensor:
    """Test-time FGSM on normal images that pushes their anomaly score up.

    attack1 ascends the avg normalized score of the unpuzzled image. attack2 attacks each
    permuted view toward the original, maps every perturbation back through the inverse
    permutation and averages them.
    """
    variant = AttackVariant(variant)
    if epsilon < 0:
        raise EvaluationError(f"epsilon must be non-negative, got {epsilon}")
    x = x.detach()
    if epsilon == 0:
        return x.clone()
    device = model_device(model)
    if device is not None:
        x = x.to(device)
    if isinstance(model, torch.nn.Module):
        model.eval()

    with torch.enable_grad():
        if variant == AttackVariant.ATTACK1:
            if normalizers is None:
                normalizers = NormalizerTable.ones(len(perms))
            start = x.clone().requires_grad_(True)
            objective = _normalized_avg_score(model, start, perms, normalizers)
            (grad,) = torch.autograd.grad(objective, start)
            delta = epsilon * grad.sign()
        else:
            delta = torch.zeros_like(x)
            for perm in perms:
                puzzled = apply_permutation(x, perm).requires_grad_(True)
                error = (model(puzzled) - x).flatten(start_dim=1).norm(p=2, dim=1).sum()
                (grad,) = torch.autograd.grad(error, puzzled)
                delta = delta + apply_permutation(epsilon * grad.sign(), invert_permutation(perm))
            delta = delta / len(perms)

    if not torch.isfinite(delta).all():
        raise PerturbationError(f"non-finite gradient during {variant.value}")
    return (x + delta).clamp(0.0, 1.0).detach()


def attack_eval(
    model: Model,
    test: LabeledImages,
    targets: np.ndarray,
    perms: Sequence[GridPermutation],
    normalizers: NormalizerTable,
    variant: Union[AttackVariant, str] = AttackVariant.ATTACK1,
    epsilons: Sequence[float] = (0.0,) + DEFAULT_ATTACK_EPSILONS,
    aggregation: Union[Aggregation, str] = Aggregation.MAX,
    batch_size: int = 256,
) -> pd.DataFrame:
    """AUROC per epsilon with attacked normals and clean anomalies."""
    targets = np.asarray(targets)
    normal_idx = torch.as_tensor(np.flatnonzero(targets == 0), dtype=torch.long)
    rows = []
    for epsilon in epsilons:
        images = test.images.clone()
        for start in range(0, normal_idx.numel(), batch_size):
            chunk = normal_idx[start:start + batch_size]
            images[chunk] = attack_normal(
                model, test.images[chunk], variant, epsilon, perms, normalizers
            ).to(images.device)
        table = score_images(model, images, perms, normalizers, batch_size=batch_size)
        value = auroc(LabeledScores(table.aggregate(aggregation), targets))
        logger.info(f"{AttackVariant(variant).value} eps={epsilon}: auroc={value:.4f}")
        rows.append({"variant": AttackVariant(variant).value, "epsilon": epsilon, "auroc": value})
    return pd.DataFrame(rows)


def subsample(data: LabeledImages, fraction: float, seed: int = 0) -> LabeledImages:
    """Seeded prefix of a random order, restored to original order; 1.0 returns every sample."""
    if not 0.0 < fraction <= 1.0:
        raise EvaluationError(f"fraction must be in (0, 1], got {fraction}")
    n = len(data)
    size = int(math.floor(n * fraction + 1e-9))
    generator = torch.Generator().manual_seed(seed)
    chosen = torch.randperm(n, generator=generator)[:size].sort().values
    return data.subset(chosen)


def data_efficiency_sweep(
    cfg: TrainConfig,
    split: ProtocolSplit,
    fractions: Sequence[float],
    aggregation: Union[Aggregation, str] = Aggregation.MAX,
    tpr_points: Sequence[float] = DEFAULT_TPR_POINTS,
    device: Union[str, torch.device] = "cpu",
) -> Dict[float, EvalReport]:
    """Train from scratch on each seeded training subsample and evaluate on the full test set."""
    reports: Dict[float, EvalReport] = {}
    for fraction in fractions:
        train = subsample(split.train, fraction, cfg.seed)
        if len(train) == 0 or len(train) < min(cfg.batch_size, len(split.train)):
            raise EvaluationError(
                f"fraction {fraction} leaves {len(train)} images, less than one batch "
                f"of {cfg.batch_size}"
            )
        logger.info(f"Data-efficiency run: fraction={fraction}, {len(train)} training images")
        result = fit(cfg, train.images, split.val.images, device=device)
        ckpt = result.checkpoint
        table = score_images(
            ckpt.unet, split.test.images, ckpt.permutations, ckpt.normalizers,
            batch_size=cfg.score_batch_size,
        )
        reports[fraction] = evaluate(
            table.aggregate(aggregation), split.targets, aggregation, tpr_points
        )
    return reports


def _zoom_crop_box(height: int, width: int, scale: float) -> Tuple[int, int, int, int]:
    crop_h = max(1, int(round(height * scale)))
    crop_w = max(1, int(round(width * scale)))
    return (height - crop_h) // 2, (width - crop_w) // 2, crop_h, crop_w


def zoom_augment(
    images: torch.Tensor,
    target_count: int = ZOOM_TARGET,
    seed: int = 0,
    scale: Tuple[float, float] = ZOOM_SCALE,
) -> torch.Tensor:
    """Append central zoomed crops of random source images until ``target_count`` is reached."""
    if images.shape[0] == 0:
        raise EvaluationError("cannot zoom-augment an empty image set")
    n = images.shape[0]
    if n >= target_count:
        return images
    height, width = images.shape[-2:]
    generator = torch.Generator().manual_seed(seed)
    extras = []
    for _ in range(target_count - n):
        source = int(torch.randint(n, (1,), generator=generator))
        s = scale[0] + (scale[1] - scale[0]) * float(torch.rand(1, generator=generator))
        top, left, crop_h, crop_w = _zoom_crop_box(height, width, s)
        zoomed = TF.resized_crop(
            images[source], top, left, crop_h, crop_w, [height, width],
            interpolation=TF.InterpolationMode.BILINEAR, antialias=True,
        )
        extras.append(zoomed.clamp(0.0, 1.0))
    return torch.cat([images, torch.stack(extras)])
