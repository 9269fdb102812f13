"""
Shortcut-removing perturbations of puzzled inputs.

Signed-gradient ascent on the reconstruction error ``||U(p + delta) - target||_2`` starting from a
uniform random point of the epsilon ball: one step is FGSM, more steps give PGD.
"""
import logging
from typing import Callable, Optional

import torch

from .models import AttackConfig, AttackTarget

logger = logging.getLogger(__name__)


class PerturbationError(ArithmeticError):
    """Non-finite gradient during perturbation search."""
    pass


def reconstruction_objective(
    model: Callable[[torch.Tensor], torch.Tensor], inputs: torch.Tensor, target: torch.Tensor
) -> torch.Tensor:
    """Sum over the batch of per-sample L2 reconstruction errors.

    Summing keeps each sample's gradient independent of the batch size.
    """
    diff = (model(inputs) - target).flatten(start_dim=1)
    return diff.norm(p=2, dim=1).sum()


def _random_start(
    like: torch.Tensor, epsilon: float, generator: Optional[torch.Generator]
) -> torch.Tensor:
    # CPU noise, moved to the input device
    noise = torch.rand(like.shape, generator=generator, dtype=like.dtype)
    return ((noise * 2.0 - 1.0) * epsilon).to(like.device)


def _signed_ascent(
    model: Callable[[torch.Tensor], torch.Tensor],
    puzzled: torch.Tensor,
    cfg: AttackConfig,
    steps: int,
    original: Optional[torch.Tensor],
    generator: Optional[torch.Generator],
) -> torch.Tensor:
    puzzled = puzzled.detach()
    if cfg.epsilon == 0:
        return puzzled.clone()

    if cfg.target == AttackTarget.ORIGINAL:
        if original is None:
            raise ValueError("attack target 'original' requires the original images")
        target = original.detach()
    else:
        target = puzzled

    if generator is None and cfg.seed is not None:
        generator = torch.Generator().manual_seed(cfg.seed)

    eps = cfg.epsilon
    delta = _random_start(puzzled, eps, generator)
    delta = (puzzled + delta).clamp(0.0, 1.0) - puzzled

    with torch.enable_grad():
        for step in range(steps):
            delta.requires_grad_(True)
            objective = reconstruction_objective(model, puzzled + delta, target)
            (grad,) = torch.autograd.grad(objective, delta)
            if not torch.isfinite(grad).all():
                bad = int((~torch.isfinite(grad)).sum())
                logger.error(f"Non-finite gradient at step {step + 1}/{steps}: {bad} entries")
                raise PerturbationError(
                    f"non-finite gradient at step {step + 1}/{steps} "
                    f"({bad} of {grad.numel()} entries, objective={objective.item():.6g})"
                )
            delta = delta.detach() + cfg.alpha * grad.sign()
            delta = delta.clamp(-eps, eps)
            delta = (puzzled + delta).clamp(0.0, 1.0) - puzzled

    return (puzzled + delta).clamp(0.0, 1.0).detach()


def fgsm_perturb(
    model: Callable[[torch.Tensor], torch.Tensor],
    puzzled: torch.Tensor,
    cfg: AttackConfig,
    original: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """FGSM with random start. Model parameters are never written or given gradients."""
    return _signed_ascent(model, puzzled, cfg, 1, original, generator)


def pgd_perturb(
    model: Callable[[torch.Tensor], torch.Tensor],
    puzzled: torch.Tensor,
    cfg: AttackConfig,
    original: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """``cfg.steps`` projected signed-gradient steps; ``steps == 1`` is exactly FGSM."""
    return _signed_ascent(model, puzzled, cfg, cfg.steps, original, generator)


def perturb(
    model: Callable[[torch.Tensor], torch.Tensor],
    puzzled: torch.Tensor,
    cfg: AttackConfig,
    original: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    if cfg.steps > 1:
        return pgd_perturb(model, puzzled, cfg, original, generator)
    return fgsm_perturb(model, puzzled, cfg, original, generator)
