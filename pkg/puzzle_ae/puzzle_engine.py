"""
Displacement-constrained grid puzzles: enumeration, application, inversion and masking.

Cells are indexed row-major from 0. A mapping is destination-indexed: ``mapping[d]`` is the
source cell whose pixels land in destination cell ``d``.
"""
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import torch

from .models import MaskMode, PermMode

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

NINE_PART_MOVED = 6


class PuzzleConfigError(ValueError):
    """Unsupported grid / permutation mode combination."""
    pass


class PuzzleShapeError(ValueError):
    """Image dimensions incompatible with the puzzle grid."""
    pass


class MaskModeError(ValueError):
    """Masking mode not applicable to the image."""
    pass


@dataclass(frozen=True)
class GridPermutation:
    """A bijection on the cells of a ``rows x cols`` grid."""

    grid: Tuple[int, int]
    mapping: Tuple[int, ...]

    def __post_init__(self):
        rows, cols = self.grid
        object.__setattr__(self, "grid", (int(rows), int(cols)))
        object.__setattr__(self, "mapping", tuple(int(m) for m in self.mapping))
        if sorted(self.mapping) != list(range(rows * cols)):
            raise PuzzleConfigError(
                f"mapping {list(self.mapping)} is not a bijection on {rows * cols} cells"
            )

    @property
    def num_cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def displacement_count(self) -> int:
        return sum(1 for dst, src in enumerate(self.mapping) if dst != src)

    @property
    def is_identity(self) -> bool:
        return self.displacement_count == 0

    def to_list(self) -> List[int]:
        return list(self.mapping)

    @classmethod
    def identity(cls, grid: Tuple[int, int]) -> "GridPermutation":
        return cls(grid, tuple(range(grid[0] * grid[1])))


@dataclass(frozen=True)
class NinePartLayout:
    """Choices made by one nine-part puzzle draw."""

    permutation: GridPermutation
    moved_cells: Tuple[int, ...]
    blacked_cell: int


def _derangements(items: Sequence[int]) -> List[Tuple[int, ...]]:
    return [
        perm
        for perm in itertools.permutations(items)
        if all(a != b for a, b in zip(perm, items))
    ]


@lru_cache(maxsize=None)
def _enumerate_cached(grid: Tuple[int, int], perm_mode: PermMode) -> Tuple[GridPermutation, ...]:
    n = grid[0] * grid[1]
    if grid == (2, 2) and perm_mode == PermMode.AT_LEAST_TWO:
        mappings = [m for m in itertools.permutations(range(n)) if m != tuple(range(n))]
    elif perm_mode == PermMode.EXACTLY_TWO:
        mappings = []
        for i, j in itertools.combinations(range(n), 2):
            mapping = list(range(n))
            mapping[i], mapping[j] = j, i
            mappings.append(tuple(mapping))
    elif grid == (3, 3) and perm_mode == PermMode.NINE_PART:
        mappings = []
        for moved in itertools.combinations(range(n), NINE_PART_MOVED):
            for deranged in _derangements(moved):
                mapping = list(range(n))
                for dst, src in zip(moved, deranged):
                    mapping[dst] = src
                mappings.append(tuple(mapping))
    else:
        raise PuzzleConfigError(
            f"unsupported grid/mode combination: grid={grid}, perm_mode={perm_mode.value}"
        )
    return tuple(GridPermutation(grid, m) for m in sorted(mappings))


def enumerate_permutations(
    grid: Tuple[int, int], perm_mode: Union[PermMode, str]
) -> List[GridPermutation]:
    """All permutations of the grid allowed by ``perm_mode``, lexicographically sorted.

    The identity is never included. ``(2, 2)`` gives 23 permutations in ``at_least_two`` mode and
    6 in ``exactly_two`` mode; ``(3, 3)`` supports ``exactly_two`` and ``nine_part`` (six cells
    moved by a derangement).
    """
    try:
        perm_mode = PermMode(perm_mode)
    except ValueError as e:
        raise PuzzleConfigError(f"unknown perm_mode: {perm_mode}") from e
    grid = (int(grid[0]), int(grid[1]))
    if grid not in ((2, 2), (3, 3)):
        raise PuzzleConfigError(f"unsupported grid: {grid}")
    return list(_enumerate_cached(grid, perm_mode))


def scoring_permutations(
    grid: Tuple[int, int], perm_mode: Union[PermMode, str], limit: int, seed: int = 0
) -> List[GridPermutation]:
    """Permutations evaluated per test sample.

    Full sets are returned whenever they fit in ``limit``; the 22 260-member nine-part set is
    reduced to a seeded, sorted subset of ``limit`` members.
    """
    perms = enumerate_permutations(grid, perm_mode)
    if PermMode(perm_mode) != PermMode.NINE_PART or len(perms) <= limit:
        return perms
    generator = torch.Generator().manual_seed(seed)
    chosen = torch.randperm(len(perms), generator=generator)[:limit].tolist()
    return [perms[i] for i in sorted(chosen)]


def invert_permutation(perm: GridPermutation) -> GridPermutation:
    inverse = [0] * perm.num_cells
    for dst, src in enumerate(perm.mapping):
        inverse[src] = dst
    return GridPermutation(perm.grid, tuple(inverse))


def compose_permutations(first: GridPermutation, second: GridPermutation) -> GridPermutation:
    """Mapping of applying ``first`` and then ``second``."""
    if first.grid != second.grid:
        raise PuzzleConfigError(f"grid mismatch: {first.grid} vs {second.grid}")
    return GridPermutation(first.grid, tuple(first.mapping[s] for s in second.mapping))


def _check_divisible(img: torch.Tensor, grid: Tuple[int, int]) -> None:
    if img.dim() < 3:
        raise PuzzleShapeError(f"expected [..., C, H, W] image, got shape {tuple(img.shape)}")
    height, width = img.shape[-2:]
    rows, cols = grid
    if height % rows or width % cols:
        raise PuzzleShapeError(
            f"image size {height}x{width} is not divisible by grid {rows}x{cols}"
        )


def _to_cells(img: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """[..., C, H, W] -> [..., rows*cols, C, h, w]"""
    rows, cols = grid
    *lead, channels, height, width = img.shape
    h, w = height // rows, width // cols
    cells = img.reshape(*lead, channels, rows, h, cols, w)
    nd = len(lead)
    cells = cells.permute(*range(nd), nd + 1, nd + 3, nd, nd + 2, nd + 4)
    return cells.reshape(*lead, rows * cols, channels, h, w)


def _from_cells(cells: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    rows, cols = grid
    *lead, _, channels, h, w = cells.shape
    nd = len(lead)
    img = cells.reshape(*lead, rows, cols, channels, h, w)
    img = img.permute(*range(nd), nd + 2, nd, nd + 3, nd + 1, nd + 4)
    return img.reshape(*lead, channels, rows * h, cols * w)


def apply_permutation(img: torch.Tensor, perm: GridPermutation) -> torch.Tensor:
    """Rearrange grid cells of ``img`` ([C, H, W] or [B, C, H, W]) according to ``perm``."""
    _check_divisible(img, perm.grid)
    if perm.is_identity:
        return img.clone()
    cells = _to_cells(img, perm.grid)
    index = torch.tensor(perm.mapping, device=img.device)
    return _from_cells(cells.index_select(-4, index), perm.grid)


def apply_permutations(
    images: torch.Tensor, mappings: torch.Tensor, grid: Tuple[int, int]
) -> torch.Tensor:
    """Per-sample permutation of a batch: ``mappings`` is a [B, rows*cols] long tensor."""
    _check_divisible(images, grid)
    if images.dim() != 4 or mappings.shape != (images.shape[0], grid[0] * grid[1]):
        raise PuzzleShapeError(
            f"mappings shape {tuple(mappings.shape)} does not match batch {tuple(images.shape)}"
        )
    cells = _to_cells(images, grid)
    index = mappings.to(images.device).long()[:, :, None, None, None].expand_as(cells)
    return _from_cells(torch.gather(cells, 1, index), grid)


def _luma(img: torch.Tensor) -> torch.Tensor:
    weights = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device)
    gray = torch.tensordot(weights, img.movedim(-3, 0), dims=1)
    return gray.clamp(0.0, 1.0)


def mask_partition(
    img: torch.Tensor,
    cell_index: Union[int, torch.Tensor],
    mask_mode: Union[MaskMode, str],
    grid: Tuple[int, int] = (2, 2),
) -> torch.Tensor:
    """Black out (inpaint) or desaturate (colorize) one grid cell.

    ``cell_index`` is an int for a single image or a [B] tensor for a batch, one cell per sample.
    """
    mask_mode = MaskMode(mask_mode)
    _check_divisible(img, grid)
    if mask_mode == MaskMode.NONE:
        return img.clone()
    channels = img.shape[-3]
    if mask_mode == MaskMode.COLORIZE and channels != 3:
        raise MaskModeError(f"colorize requires 3 channels, image has {channels}")

    n_cells = grid[0] * grid[1]
    cells = _to_cells(img, grid).clone()
    if isinstance(cell_index, torch.Tensor) and cell_index.dim() == 1:
        if img.dim() != 4 or cell_index.shape[0] != img.shape[0]:
            raise PuzzleShapeError("per-sample cell indices need a batch of matching size")
        if ((cell_index < 0) | (cell_index >= n_cells)).any():
            raise PuzzleConfigError(f"cell index out of range for {n_cells} cells")
        rows = torch.arange(img.shape[0], device=img.device)
        selected = cells[rows, cell_index.to(img.device)]
        if mask_mode == MaskMode.INPAINT:
            selected = torch.zeros_like(selected)
        else:
            selected = _luma(selected).unsqueeze(-3).expand_as(selected)
        cells[rows, cell_index.to(img.device)] = selected
    else:
        k = int(cell_index)
        if not 0 <= k < n_cells:
            raise PuzzleConfigError(f"cell index {k} out of range for {n_cells} cells")
        selected = cells[..., k, :, :, :]
        if mask_mode == MaskMode.INPAINT:
            cells[..., k, :, :, :] = 0.0
        else:
            cells[..., k, :, :, :] = _luma(selected).unsqueeze(-3).expand_as(selected)
    return _from_cells(cells, grid)


def make_puzzle(
    img: torch.Tensor,
    perm: GridPermutation,
    masked_cell: Optional[Union[int, torch.Tensor]] = None,
    mask_mode: Union[MaskMode, str] = MaskMode.NONE,
) -> torch.Tensor:
    """Mask one cell (pre-permutation) and then permute the cells."""
    if masked_cell is None or MaskMode(mask_mode) == MaskMode.NONE:
        return apply_permutation(img, perm)
    return apply_permutation(mask_partition(img, masked_cell, mask_mode, perm.grid), perm)


def make_puzzle_batch(
    images: torch.Tensor,
    mappings: torch.Tensor,
    grid: Tuple[int, int],
    masked_cells: Optional[torch.Tensor] = None,
    mask_mode: Union[MaskMode, str] = MaskMode.NONE,
) -> torch.Tensor:
    """Batched ``make_puzzle`` with one permutation and one masked cell per sample."""
    if masked_cells is not None and MaskMode(mask_mode) != MaskMode.NONE:
        images = mask_partition(images, masked_cells, mask_mode, grid)
    return apply_permutations(images, mappings, grid)


def _sample_derangement(size: int, generator: torch.Generator) -> List[int]:
    while True:
        candidate = torch.randperm(size, generator=generator).tolist()
        if all(i != c for i, c in enumerate(candidate)):
            return candidate


def sample_nine_part_layout(generator: torch.Generator) -> NinePartLayout:
    n = 9
    moved = sorted(torch.randperm(n, generator=generator)[:NINE_PART_MOVED].tolist())
    deranged = _sample_derangement(NINE_PART_MOVED, generator)
    mapping = list(range(n))
    for j, dst in enumerate(moved):
        mapping[dst] = moved[deranged[j]]
    unmoved = [c for c in range(n) if c not in moved]
    blacked = unmoved[int(torch.randint(len(unmoved), (1,), generator=generator))]
    return NinePartLayout(GridPermutation((3, 3), tuple(mapping)), tuple(moved), blacked)


def make_nine_part_puzzle(
    img: torch.Tensor, rng_state: Union[int, torch.Generator]
) -> Tuple[torch.Tensor, NinePartLayout]:
    """3x3 puzzle with six cells deranged among themselves and one unmoved cell blacked.

    ``rng_state`` is a seed or a CPU ``torch.Generator``; the returned layout records every
    random choice.
    """
    _check_divisible(img, (3, 3))
    if isinstance(rng_state, torch.Generator):
        generator = rng_state
    else:
        generator = torch.Generator().manual_seed(int(rng_state))
    layout = sample_nine_part_layout(generator)
    puzzled = make_puzzle(img, layout.permutation, layout.blacked_cell, MaskMode.INPAINT)
    return puzzled, layout


def permutations_to_json(perms: Sequence[GridPermutation]) -> str:
    return json.dumps([p.to_list() for p in perms])


def permutations_from_json(text: str, grid: Tuple[int, int]) -> List[GridPermutation]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise PuzzleConfigError(f"invalid permutation JSON: {e}") from e
    return [GridPermutation(grid, tuple(m)) for m in raw]


def permutation_set_hash(perms: Sequence[GridPermutation]) -> str:
    """Stable short hash of a permutation set, recorded in manifests and checkpoints."""
    payload = json.dumps(
        {"grid": list(perms[0].grid) if perms else [], "mappings": [p.to_list() for p in perms]},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def mapping_tensor(perms: Sequence[GridPermutation]) -> torch.Tensor:
    """[K, rows*cols] long tensor of the mappings, for batched sampling."""
    return torch.tensor([p.mapping for p in perms], dtype=torch.long)
