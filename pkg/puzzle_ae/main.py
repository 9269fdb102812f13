import logging
from datetime import datetime
from typing import Optional

import torch
from fastapi import Depends, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from . import config
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .models import ScoreRequest, ScoreResponse
from .puzzle_engine import PuzzleShapeError, permutation_set_hash
from .scoring import ScoringError, default_aggregation, score_sample

app = FastAPI(title="Puzzle AE Scoring")
logger = logging.getLogger(__name__)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"]
)

# Loaded checkpoint, keyed by path so a changed CHECKPOINT_PATH reloads
_loaded: dict = {}


def get_checkpoint() -> Checkpoint:
    path: Optional[str] = config.CHECKPOINT_PATH
    if not path:
        raise HTTPException(status_code=503, detail="No checkpoint configured (CHECKPOINT_PATH)")
    if path not in _loaded:
        try:
            _loaded.clear()
            _loaded[path] = load_checkpoint(path, config.resolve_device())
        except CheckpointError as e:
            logger.error(f"Failed to load checkpoint {path}: {e}")
            raise HTTPException(status_code=503, detail=f"Checkpoint unavailable: {e}") from e
    ckpt = _loaded[path]
    if ckpt.normalizers is None:
        raise HTTPException(status_code=503, detail="Checkpoint has no normalizers")
    return ckpt


@app.get("/health")
async def health_check():
    """Health check endpoint for container orchestration."""
    return {
        "status": "healthy",
        "timestamp": datetime.utcnow().isoformat(),
        "service": "puzzle-ae-scoring",
        "checkpoint_configured": bool(config.CHECKPOINT_PATH),
    }


@app.get("/permutations")
async def list_permutations(ckpt: Checkpoint = Depends(get_checkpoint)):
    return {
        "grid": list(ckpt.train_config.puzzle.grid),
        "perm_mode": ckpt.train_config.puzzle.perm_mode.value,
        "hash": permutation_set_hash(ckpt.permutations),
        "permutations": [p.to_list() for p in ckpt.permutations],
    }


@app.post("/score", response_model=ScoreResponse)
async def score(payload: ScoreRequest, ckpt: Checkpoint = Depends(get_checkpoint)):
    try:
        image = torch.tensor(payload.pixels, dtype=torch.float32)
    except (ValueError, TypeError) as e:
        raise HTTPException(status_code=422, detail=f"Pixels must form a [C][H][W] array: {e}")

    expected = (
        ckpt.unet.channels,
        *ckpt.train_config.puzzle.canvas_size,
    )
    if tuple(image.shape) != expected:
        raise HTTPException(
            status_code=422,
            detail=f"Expected image of shape {list(expected)}, got {list(image.shape)}",
        )
    if image.min() < 0 or image.max() > 1:
        raise HTTPException(status_code=422, detail="Pixel values must lie in [0, 1]")

    aggregation = payload.aggregation or default_aggregation(ckpt.image_size)
    try:
        result = score_sample(ckpt.unet, image, ckpt.permutations, ckpt.normalizers, aggregation)
    except (ScoringError, PuzzleShapeError) as e:
        raise HTTPException(status_code=422, detail=str(e))
    logger.info(f"Scored image: {aggregation.value}={result['score']:.4f}")
    return ScoreResponse(aggregation=aggregation, **result)
