"""
Command-line entry points: train, eval, attack-eval, sweep, protocol1 and perms.

Every command except ``perms`` writes its artifacts plus a ``manifest.json`` into one output
directory; passing that manifest back as ``--config`` replays the run.
"""
import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from . import __version__
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    write_json_atomic,
    write_manifest,
)
from .config import LOG_LEVEL, OUTPUT_ROOT, load_run_config, resolve_device
from .data import LabeledImages, load_dataset, to_grayscale
from .evaluation import (
    DEFAULT_ATTACK_EPSILONS,
    LabeledScores,
    ProtocolSplit,
    attack_eval,
    auroc,
    data_efficiency_sweep,
    evaluate_table,
    make_epoch_evaluator,
    medical_split,
    plot_roc_svg,
    plot_training_curves,
    protocol1_split,
    protocol2_split,
    roc_points,
    run_protocol1,
    subsample,
    zoom_augment,
)
from .models import (
    Ablation,
    Aggregation,
    AttackVariant,
    MaskMode,
    PermMode,
    Protocol,
    RunConfig,
    RunManifest,
)
from .puzzle_engine import enumerate_permutations, permutation_set_hash, scoring_permutations
from .scoring import NormalizerTable, compute_normalizers, default_aggregation, score_images
from .training import fit, write_epoch_csv

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

DEFAULT_SWEEP_FRACTIONS = (1.0, 0.5, 0.25, 1.0 / 12)


def _grid(text: str):
    try:
        rows, cols = (int(part) for part in text.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"grid must look like 2x2, got {text!r}") from e
    return rows, cols


def _common_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="YAML run config or a run manifest JSON")
    parent.add_argument("--seed", type=int)
    parent.add_argument("--out", type=Path, help="output directory")
    parent.add_argument("--aggregation", choices=[a.value for a in Aggregation])
    parent.add_argument("--protocol", choices=[p.value for p in Protocol])
    parent.add_argument("--normal-class", type=int)
    parent.add_argument("--grayscale", action="store_true", default=None)
    parent.add_argument("--device", help="cpu, cuda or auto")
    parent.add_argument("--log-level", default=None)
    return parent


def _training_flags(
    parser: argparse.ArgumentParser, with_epsilon: bool = True, with_fraction: bool = True
) -> None:
    parser.add_argument("--lambda-adv", type=float)
    if with_epsilon:
        parser.add_argument("--epsilon", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--mask", choices=[m.value for m in MaskMode])
    parser.add_argument("--perm-mode", choices=[m.value for m in PermMode])
    if with_fraction:
        parser.add_argument("--fraction", type=float)
    parser.add_argument("--ablation", choices=[a.value for a in Ablation])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="puzzle-ae",
        description="Puzzle-solving autoencoder anomaly detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common_parser()

    train = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    _training_flags(train)

    evaluate = sub.add_parser("eval", parents=[common], help="score a test split")
    evaluate.add_argument("--checkpoint", type=Path, required=True)
    evaluate.add_argument("--tpr", type=float, nargs="+", dest="tpr_points")

    attack = sub.add_parser("attack-eval", parents=[common], help="AUROC under attacked normals")
    attack.add_argument("--checkpoint", type=Path, required=True)
    attack.add_argument(
        "--variant", choices=[v.value for v in AttackVariant], nargs="+",
        default=[AttackVariant.ATTACK1.value],
    )
    attack.add_argument(
        "--epsilon", type=float, nargs="+", dest="epsilons", default=list(DEFAULT_ATTACK_EPSILONS)
    )

    sweep = sub.add_parser("sweep", parents=[common], help="data-efficiency sweep")
    _training_flags(sweep, with_fraction=False)
    sweep.add_argument("--fractions", type=float, nargs="+", default=list(DEFAULT_SWEEP_FRACTIONS))

    protocol1 = sub.add_parser("protocol1", parents=[common], help="repeated 80/20 runs")
    _training_flags(protocol1)
    protocol1.add_argument("--repeats", type=int, default=30)

    perms = sub.add_parser("perms", help="print the permutation set, one JSON line each")
    perms.add_argument("--grid", type=_grid, default=(2, 2))
    perms.add_argument(
        "--perm-mode", choices=[m.value for m in PermMode], default=PermMode.AT_LEAST_TWO.value
    )
    perms.add_argument("--log-level", default=None)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys for every flag the user actually passed."""
    mapping = {
        "seed": "train.seed",
        "aggregation": "aggregation",
        "protocol": "protocol",
        "normal_class": "normal_class",
        "grayscale": "grayscale",
        "lambda_adv": "train.lambda_adv",
        "epsilon": "train.attack.epsilon",
        "alpha": "train.attack.alpha",
        "steps": "train.attack.steps",
        "mask": "train.puzzle.mask_mode",
        "perm_mode": "train.puzzle.perm_mode",
        "fraction": "fraction",
        "ablation": "ablation",
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "tpr_points": "tpr_points",
    }
    return {dotted: getattr(args, flag) for flag, dotted in mapping.items() if hasattr(args, flag)}


def output_dir(args: argparse.Namespace) -> Path:
    if args.out is not None:
        out = args.out
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        out = Path(OUTPUT_ROOT) / f"{args.command}-{stamp}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _test_spec(cfg: RunConfig):
    if cfg.test_dataset is not None:
        return cfg.test_dataset
    return cfg.dataset.model_copy(update={"split": "test"})


def _grayscale(data: LabeledImages) -> LabeledImages:
    return data.with_images(to_grayscale(data.images))


def load_split(cfg: RunConfig, apply_fraction: bool = True) -> ProtocolSplit:
    """Load data and partition it according to the configured protocol.

    ``apply_fraction=False`` keeps the full training split for callers that subsample themselves.
    """
    train_cfg = cfg.resolved_train_config()
    data = load_dataset(cfg.dataset)
    if cfg.grayscale:
        data = _grayscale(data)

    if cfg.protocol == Protocol.TWO:
        test = load_dataset(_test_spec(cfg))
        if cfg.grayscale:
            test = _grayscale(test)
        split = protocol2_split(
            data, test, cfg.normal_class, train_cfg.val_fraction, train_cfg.seed
        )
    elif cfg.protocol == Protocol.ONE:
        split = protocol1_split(data, cfg.normal_class, train_cfg.seed)
    else:
        split = medical_split(data, cfg.normal_class, seed=train_cfg.seed)

    if apply_fraction and cfg.fraction < 1.0:
        split.train = subsample(split.train, cfg.fraction, train_cfg.seed)
    if cfg.zoom_target is not None and len(split.train) < cfg.zoom_target:
        images = zoom_augment(split.train.images, cfg.zoom_target, train_cfg.seed)
        extra = images.shape[0] - len(split.train)
        split.train = LabeledImages(
            images=images,
            labels=torch.full((images.shape[0],), cfg.normal_class, dtype=torch.long),
            sample_ids=split.train.sample_ids + [f"zoom/{i}" for i in range(extra)],
            class_names=split.train.class_names,
        )
    return split


def _has_both_classes(targets: np.ndarray) -> bool:
    return bool(targets.size) and 0 < int(np.sum(targets)) < targets.size


def _resolve_aggregation(cfg: RunConfig, image_size: int) -> Aggregation:
    return cfg.aggregation or default_aggregation(image_size)


def _manifest(
    command: str,
    cfg: RunConfig,
    outputs: Dict[str, Path],
    checkpoint_path: Optional[Path] = None,
    permutation_hash: Optional[str] = None,
    stability: Optional[Dict] = None,
) -> RunManifest:
    return RunManifest(
        command=command,
        config=cfg.model_dump(mode="json"),
        seed=cfg.train.seed,
        version=__version__,
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
        outputs={name: str(path) for name, path in outputs.items()},
        permutation_hash=permutation_hash,
        stability=stability,
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, overrides_from_args(args))
    train_cfg = cfg.resolved_train_config()
    out = output_dir(args)
    device = resolve_device(args.device)
    split = load_split(cfg)

    evaluator = None
    if _has_both_classes(split.targets):
        perms = scoring_permutations(
            train_cfg.puzzle.grid, train_cfg.puzzle.perm_mode,
            train_cfg.puzzle.max_score_permutations, seed=train_cfg.seed,
        )
        evaluator = make_epoch_evaluator(
            split.test.images, split.targets, perms, train_cfg.score_batch_size
        )

    checkpoint_path = out / "checkpoint.pt"
    metrics_path = out / "epochs.csv"
    result = fit(
        train_cfg,
        split.train.images,
        split.val.images,
        evaluator=evaluator,
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        device=device,
    )
    write_epoch_csv(result.records, metrics_path)
    curves_path = plot_training_curves(result.records, out / "training_curves.svg")
    manifest = _manifest(
        "train",
        cfg,
        {"epochs": metrics_path, "training_curves": curves_path},
        checkpoint_path=checkpoint_path,
        permutation_hash=result.checkpoint.permutation_hash,
        stability=result.stability,
    )
    write_manifest(manifest, out / "manifest.json")
    logger.info(f"Training finished; artifacts in {out}")
    return EXIT_OK


def _normalizers_for(ckpt: Checkpoint, split: ProtocolSplit) -> NormalizerTable:
    if ckpt.normalizers is not None:
        return ckpt.normalizers
    logger.warning("Checkpoint has no normalizers; computing them from the validation split")
    images = split.val.images if len(split.val) else split.train.images
    return compute_normalizers(
        ckpt.unet, images, ckpt.permutations, ckpt.train_config.score_batch_size
    )


def _load_for_eval(args: argparse.Namespace):
    cfg = load_run_config(args.config, overrides_from_args(args))
    ckpt = load_checkpoint(args.checkpoint, resolve_device(args.device))
    if tuple(cfg.dataset.canvas_size) != tuple(ckpt.train_config.puzzle.canvas_size):
        raise CheckpointError(
            f"checkpoint canvas {ckpt.train_config.puzzle.canvas_size} differs from dataset "
            f"canvas {cfg.dataset.canvas_size}"
        )
    split = load_split(cfg)
    if not _has_both_classes(split.targets):
        raise ValueError("test split needs both normal and anomalous samples")
    return cfg, ckpt, split


def cmd_eval(args: argparse.Namespace) -> int:
    cfg, ckpt, split = _load_for_eval(args)
    out = output_dir(args)
    normalizers = _normalizers_for(ckpt, split)
    table = score_images(
        ckpt.unet,
        split.test.images,
        ckpt.permutations,
        normalizers,
        sample_ids=split.test.sample_ids,
        labels=split.targets,
        batch_size=ckpt.train_config.score_batch_size,
    )
    reports = evaluate_table(table, split.targets, cfg.tpr_points)
    chosen = _resolve_aggregation(cfg, ckpt.image_size)

    outputs: Dict[str, Path] = {"scores": out / "scores.csv"}
    table.to_csv(outputs["scores"])
    for agg, report in reports.items():
        path = out / f"report_{agg.value}.json"
        write_json_atomic(report.model_dump(mode="json"), path)
        outputs[f"report_{agg.value}"] = path
    outputs["report"] = write_json_atomic(
        reports[chosen].model_dump(mode="json"), out / "report.json"
    )

    ls = LabeledScores(table.aggregate(chosen), split.targets)
    outputs["roc"] = out / "roc.csv"
    roc_points(ls).to_csv(outputs["roc"], index=False)
    outputs["roc_svg"] = plot_roc_svg(ls, out / "roc.svg", title=f"ROC ({chosen.value})")

    write_manifest(
        _manifest("eval", cfg, outputs, args.checkpoint, ckpt.permutation_hash),
        out / "manifest.json",
    )
    for agg, report in reports.items():
        logger.info(f"AUROC ({agg.value}): {report.auroc:.4f}  FPR@TPR: {report.fpr_at_tpr}")
    return EXIT_OK


def cmd_attack_eval(args: argparse.Namespace) -> int:
    cfg, ckpt, split = _load_for_eval(args)
    out = output_dir(args)
    normalizers = _normalizers_for(ckpt, split)
    aggregation = _resolve_aggregation(cfg, ckpt.image_size)
    epsilons: List[float] = [0.0] + [e for e in args.epsilons if e != 0.0]
    frames = [
        attack_eval(
            ckpt.unet,
            split.test,
            split.targets,
            ckpt.permutations,
            normalizers,
            variant=variant,
            epsilons=epsilons,
            aggregation=aggregation,
            batch_size=ckpt.train_config.score_batch_size,
        )
        for variant in args.variant
    ]
    path = out / "attack_auroc.csv"
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    write_manifest(
        _manifest(
            "attack-eval", cfg, {"attack_auroc": path}, args.checkpoint, ckpt.permutation_hash
        ),
        out / "manifest.json",
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, overrides_from_args(args))
    train_cfg = cfg.resolved_train_config()
    out = output_dir(args)
    if cfg.fraction < 1.0:
        logger.warning(f"Ignoring fraction={cfg.fraction}; the sweep subsamples per --fractions")
    split = load_split(cfg, apply_fraction=False)
    fractions = sorted(set(args.fractions), reverse=True)
    aggregation = _resolve_aggregation(cfg, train_cfg.puzzle.canvas_size[0])
    reports = data_efficiency_sweep(
        train_cfg, split, fractions, aggregation, cfg.tpr_points, resolve_device(args.device)
    )
    rows = []
    for fraction, report in reports.items():
        row = {"fraction": fraction, "auroc": report.auroc}
        row.update({f"fpr@tpr_{point}": fpr for point, fpr in report.fpr_at_tpr.items()})
        rows.append(row)
    path = out / "sweep.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    write_manifest(_manifest("sweep", cfg, {"sweep": path}), out / "manifest.json")
    return EXIT_OK


def cmd_protocol1(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, overrides_from_args(args))
    train_cfg = cfg.resolved_train_config()
    out = output_dir(args)
    device = resolve_device(args.device)
    data = load_dataset(cfg.dataset)
    if cfg.grayscale:
        data = _grayscale(data)
    aggregation = _resolve_aggregation(cfg, train_cfg.puzzle.canvas_size[0])

    def run_fn(split: ProtocolSplit, seed: int) -> float:
        seeded = train_cfg.model_copy(update={"seed": seed})
        result = fit(seeded, split.train.images, split.val.images, device=device)
        ckpt = result.checkpoint
        table = score_images(
            ckpt.unet, split.test.images, ckpt.permutations, ckpt.normalizers,
            batch_size=seeded.score_batch_size,
        )
        return auroc(LabeledScores(table.aggregate(aggregation), split.targets))

    summary = run_protocol1(data, cfg.normal_class, run_fn, args.repeats)
    path = write_json_atomic(summary, out / "protocol1.json")
    write_manifest(_manifest("protocol1", cfg, {"protocol1": path}), out / "manifest.json")
    logger.info(f"Protocol 1 mean AUROC over {args.repeats} runs: {summary['mean']:.4f}")
    return EXIT_OK


def cmd_perms(args: argparse.Namespace) -> int:
    perms = enumerate_permutations(args.grid, args.perm_mode)
    for perm in perms:
        print(json.dumps(perm.to_list()))
    logger.info(f"{len(perms)} permutations, hash {permutation_set_hash(perms)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "attack-eval": cmd_attack_eval,
    "sweep": cmd_sweep,
    "protocol1": cmd_protocol1,
    "perms": cmd_perms,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ArithmeticError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except (ValueError, CheckpointError, FileNotFoundError) as e:
        logger.error(f"{e}")
        return EXIT_CONFIG
    except Exception:
        logger.exception("Command failed")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
