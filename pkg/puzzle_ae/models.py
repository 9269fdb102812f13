from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class PermMode(str, Enum):
    AT_LEAST_TWO = "at_least_two"
    EXACTLY_TWO = "exactly_two"
    NINE_PART = "nine_part"


class MaskMode(str, Enum):
    NONE = "none"
    INPAINT = "inpaint"
    COLORIZE = "colorize"


class Aggregation(str, Enum):
    MIN = "min"
    MAX = "max"
    AVG = "avg"


class AttackTarget(str, Enum):
    PUZZLED = "puzzled"
    ORIGINAL = "original"


class AttackVariant(str, Enum):
    ATTACK1 = "attack1"
    ATTACK2 = "attack2"


class DatasetFormat(str, Enum):
    IMAGE_FOLDER = "image_folder"
    IDX_PAIR = "idx_pair"
    SYNTHETIC = "synthetic"


class ResizeMode(str, Enum):
    RESIZE = "resize"
    PAD = "pad"


class LabelRule(str, Enum):
    FOLDER = "folder"
    LABEL_FILE = "label_file"


class Protocol(str, Enum):
    ONE = "1"
    TWO = "2"
    MEDICAL = "medical"


class Ablation(str, Enum):
    PAE = "pae"
    CPAE = "cpae"
    CPAE_G = "cpae-g"


SUPPORTED_GRIDS = ((2, 2), (3, 3))


class PuzzleConfig(BaseModel):
    """Geometry and sampling rules of the puzzle pretext task."""

    grid: Tuple[int, int] = (2, 2)
    perm_mode: PermMode = PermMode.AT_LEAST_TWO
    # None resolves from the channel count: inpaint for gray, colorize for color
    mask_mode: Optional[MaskMode] = None
    canvas_size: Tuple[int, int] = (32, 32)
    max_score_permutations: int = Field(23, ge=1)

    @field_validator("grid")
    @classmethod
    def _supported_grid(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if tuple(value) not in SUPPORTED_GRIDS:
            raise ValueError(f"grid must be one of {SUPPORTED_GRIDS}, got {tuple(value)}")
        return tuple(value)

    @model_validator(mode="after")
    def _check_geometry(self) -> "PuzzleConfig":
        rows, cols = self.grid
        height, width = self.canvas_size
        if height % rows or width % cols:
            raise ValueError(
                f"canvas_size {self.canvas_size} is not divisible by grid {self.grid}"
            )
        if self.perm_mode == PermMode.NINE_PART and self.grid != (3, 3):
            raise ValueError("perm_mode nine_part requires grid (3, 3)")
        if self.perm_mode == PermMode.AT_LEAST_TWO and self.grid != (2, 2):
            raise ValueError("perm_mode at_least_two is only enumerable for grid (2, 2)")
        return self

    def resolved_mask_mode(self, channels: int) -> MaskMode:
        if self.mask_mode is not None:
            return self.mask_mode
        return MaskMode.COLORIZE if channels == 3 else MaskMode.INPAINT


class AttackConfig(BaseModel):
    """FGSM/PGD perturbation settings on the [0, 1] pixel scale."""

    epsilon: float = Field(0.05, ge=0.0)
    alpha: float = Field(0.05, gt=0.0)
    steps: int = Field(1, ge=1)
    target: AttackTarget = AttackTarget.PUZZLED
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _step_inside_ball(self) -> "AttackConfig":
        # a zero-magnitude attack is skipped, so alpha is irrelevant there
        if self.steps == 1 and self.epsilon > 0 and self.alpha > self.epsilon:
            raise ValueError(
                f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon}) for a single step"
            )
        return self


class TrainConfig(BaseModel):
    lr_unet: float = Field(1e-3, gt=0.0)
    lr_disc: float = Field(2e-4, gt=0.0)
    lambda_adv: float = Field(1.0, ge=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(100, ge=1)
    plateau_patience: int = Field(50, ge=0)
    plateau_factor: float = Field(0.8, gt=0.0, lt=1.0)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    puzzle: PuzzleConfig = Field(default_factory=PuzzleConfig)
    seed: int = 0
    depth: int = Field(4, ge=1)
    base_channels: int = Field(64, ge=1)
    disc_channels: int = Field(64, ge=1)
    val_fraction: float = Field(0.15, ge=0.0, lt=1.0)
    eval_every: int = Field(1, ge=1)
    stability_window: int = Field(20, ge=1)
    score_batch_size: int = Field(256, ge=1)
    deterministic: bool = True

    def apply_ablation(self, ablation: Ablation) -> "TrainConfig":
        """Return a copy configured for one of the component ablations."""
        update: Dict = {}
        puzzle = self.puzzle.model_copy()
        if ablation == Ablation.PAE:
            update["lambda_adv"] = 0.0
            update["attack"] = self.attack.model_copy(update={"epsilon": 0.0})
            puzzle = puzzle.model_copy(update={"mask_mode": MaskMode.NONE})
        elif ablation == Ablation.CPAE:
            update["lambda_adv"] = 0.0
            if puzzle.mask_mode == MaskMode.NONE:
                puzzle = puzzle.model_copy(update={"mask_mode": None})
        elif ablation == Ablation.CPAE_G:
            if self.lambda_adv == 0:
                update["lambda_adv"] = 1.0
            if puzzle.mask_mode == MaskMode.NONE:
                puzzle = puzzle.model_copy(update={"mask_mode": None})
        update["puzzle"] = puzzle
        return self.model_copy(update=update)


class EpochRecord(BaseModel):
    epoch: int
    loss_rec: float = Field(..., ge=0.0)
    loss_adv: float = Field(..., ge=0.0)
    loss_total: float = Field(..., ge=0.0)
    loss_disc: Optional[float] = None
    lr_unet: float
    lr_disc: float
    auroc_min: Optional[float] = None
    auroc_max: Optional[float] = None
    auroc_avg: Optional[float] = None


class EvalReport(BaseModel):
    auroc: float = Field(..., ge=0.0, le=1.0)
    # keys are the TPR operating points rendered as strings, e.g. "0.99"
    fpr_at_tpr: Dict[str, float] = Field(default_factory=dict)
    n_normal: int
    n_anomalous: int
    aggregation: Aggregation

    @field_validator("fpr_at_tpr")
    @classmethod
    def _fpr_range(cls, value: Dict[str, float]) -> Dict[str, float]:
        for point, fpr in value.items():
            if not 0.0 <= fpr <= 1.0:
                raise ValueError(f"fpr at tpr {point} out of range: {fpr}")
        return value


class DatasetSpec(BaseModel):
    """Where a dataset lives and how to bring it onto the canvas."""

    root: Path = Path("data")
    format: DatasetFormat = DatasetFormat.IMAGE_FOLDER
    channels: int = 1
    canvas_size: Tuple[int, int] = (32, 32)
    split: str = "train"
    # None resolves from the format: pad for idx_pair digits, resize otherwise
    resize_mode: Optional[ResizeMode] = None
    label_rule: LabelRule = LabelRule.FOLDER
    label_file: Optional[Path] = None
    # synthetic format only
    num_samples: int = Field(64, ge=1)
    num_classes: int = Field(2, ge=1)
    seed: int = 0

    @field_validator("channels")
    @classmethod
    def _channels(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {value}")
        return value

    @model_validator(mode="after")
    def _label_file_present(self) -> "DatasetSpec":
        if self.label_rule == LabelRule.LABEL_FILE and self.label_file is None:
            raise ValueError("label_rule label_file requires label_file")
        return self

    @model_validator(mode="after")
    def _default_resize_mode(self) -> "DatasetSpec":
        if self.resize_mode is None:
            pad = self.format == DatasetFormat.IDX_PAIR
            self.resize_mode = ResizeMode.PAD if pad else ResizeMode.RESIZE
        return self


class RunConfig(BaseModel):
    """Everything a CLI run needs: data, protocol and training settings."""

    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    test_dataset: Optional[DatasetSpec] = None
    normal_class: int = 0
    protocol: Protocol = Protocol.TWO
    train: TrainConfig = Field(default_factory=TrainConfig)
    aggregation: Optional[Aggregation] = None
    grayscale: bool = False
    ablation: Optional[Ablation] = None
    fraction: float = Field(1.0, gt=0.0, le=1.0)
    zoom_target: Optional[int] = Field(None, ge=1)
    tpr_points: List[float] = Field(default_factory=lambda: [0.99, 0.995])

    @model_validator(mode="after")
    def _canvas_matches(self) -> "RunConfig":
        if tuple(self.dataset.canvas_size) != tuple(self.train.puzzle.canvas_size):
            raise ValueError(
                f"dataset.canvas_size {self.dataset.canvas_size} differs from "
                f"train.puzzle.canvas_size {self.train.puzzle.canvas_size}"
            )
        return self

    def resolved_train_config(self) -> TrainConfig:
        if self.ablation is None:
            return self.train
        return self.train.apply_ablation(self.ablation)


class RunManifest(BaseModel):
    command: str
    config: Dict
    seed: int
    version: str
    checkpoint_path: Optional[str] = None
    outputs: Dict[str, str] = Field(default_factory=dict)
    permutation_hash: Optional[str] = None
    stability: Optional[Dict[str, Dict[str, float]]] = None
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat())


class ScoreRequest(BaseModel):
    pixels: List[List[List[float]]] = Field(..., description="Image as [C][H][W] in [0, 1]")
    aggregation: Optional[Aggregation] = None


class ScoreResponse(BaseModel):
    raw: List[float]
    normalized: List[float]
    s_min: float
    s_max: float
    s_avg: float
    score: float
    aggregation: Aggregation
