"""
Reconstruction network U(.) and discriminator D with its intermediate feature tap f_D(.).

Neither network uses batch normalization, so a sample's forward result does not depend on the
rest of its batch.
"""
import logging
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

INIT_STD = 0.02
MAX_WIDTH_MULTIPLIER = 8


class NetworkConfigError(ValueError):
    """Incompatible network geometry."""
    pass


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


class UpBlock(nn.Module):
    """Bilinear upsampling + conv, then concatenation with the skip and a double conv."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.reduce = nn.Conv2d(in_ch, skip_ch, kernel_size=3, padding=1)
        self.conv = _double_conv(skip_ch * 2, out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = F.leaky_relu(self.reduce(x), 0.2)
        return self.conv(torch.cat([x, skip], dim=1))


class ReconstructionNet(nn.Module):
    """U-Net: ``depth`` pooling levels with a skip connection at each resolution."""

    def __init__(self, channels: int = 1, depth: int = 4, base_channels: int = 64):
        super().__init__()
        self.channels = channels
        self.depth = depth
        self.base_channels = base_channels

        widths = [base_channels * min(2 ** i, MAX_WIDTH_MULTIPLIER) for i in range(depth + 1)]
        self.encoders = nn.ModuleList()
        in_ch = channels
        for width in widths[:-1]:
            self.encoders.append(_double_conv(in_ch, width))
            in_ch = width
        self.bottleneck = _double_conv(widths[-2], widths[-1])
        self.decoders = nn.ModuleList(
            UpBlock(widths[i + 1], widths[i], widths[i]) for i in reversed(range(depth))
        )
        self.head = nn.Conv2d(widths[0], channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips: List[torch.Tensor] = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for decoder, skip in zip(self.decoders, reversed(skips)):
            x = decoder(x, skip)
        return torch.sigmoid(self.head(x))

    def architecture(self) -> dict:
        return {"channels": self.channels, "depth": self.depth, "base_channels": self.base_channels}


class Discriminator(nn.Module):
    """DCGAN-style strided classifier.

    ``forward`` returns ``(logits [B], features [B, F])`` where the features are the flattened
    activations of the last strided block (the penultimate layer).
    """

    def __init__(self, channels: int = 1, image_size: int = 32, base_channels: int = 64):
        super().__init__()
        self.channels = channels
        self.image_size = image_size
        self.base_channels = base_channels

        blocks = []
        in_ch, size, width = channels, image_size, base_channels
        while size > 4:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, width, kernel_size=4, stride=2, padding=1, bias=False),
                    nn.LeakyReLU(0.2, inplace=True),
                )
            )
            in_ch, size = width, size // 2
            width = min(width * 2, base_channels * MAX_WIDTH_MULTIPLIER)
        if not blocks:
            raise NetworkConfigError(f"image_size {image_size} too small for the discriminator")
        self.blocks = nn.Sequential(*blocks)
        self.feature_shape = (in_ch, size, size)
        self.classifier = nn.Conv2d(in_ch, 1, kernel_size=size, bias=False)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).flatten(start_dim=1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        tapped = self.blocks(x)
        logits = self.classifier(tapped).flatten()
        return logits, tapped.flatten(start_dim=1)

    def architecture(self) -> dict:
        return {
            "channels": self.channels,
            "image_size": self.image_size,
            "base_channels": self.base_channels,
        }


def init_weights(module: nn.Module) -> None:
    """DCGAN convention: conv weights ~ N(0, 0.02), zero biases."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _seeded_build(factory, seed: Optional[int]) -> nn.Module:
    if seed is None:
        model = factory()
        model.apply(init_weights)
        return model
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = factory()
        model.apply(init_weights)
    return model


def build_reconstruction_net(
    channels: int,
    image_size: int,
    depth: int = 4,
    base_channels: int = 64,
    seed: Optional[int] = None,
) -> ReconstructionNet:
    if channels not in (1, 3):
        raise NetworkConfigError(f"channels must be 1 or 3, got {channels}")
    if depth < 1 or image_size % (2 ** depth):
        raise NetworkConfigError(
            f"image_size {image_size} is not divisible by 2^depth (depth={depth})"
        )
    net = _seeded_build(lambda: ReconstructionNet(channels, depth, base_channels), seed)
    logger.info(
        f"Built U-Net: channels={channels}, size={image_size}, depth={depth}, "
        f"base={base_channels}, params={sum(p.numel() for p in net.parameters())}"
    )
    return net


def build_discriminator(
    channels: int, image_size: int, base_channels: int = 64, seed: Optional[int] = None
) -> Discriminator:
    if channels not in (1, 3):
        raise NetworkConfigError(f"channels must be 1 or 3, got {channels}")
    if image_size < 8:
        raise NetworkConfigError(f"image_size {image_size} too small for the discriminator")
    return _seeded_build(lambda: Discriminator(channels, image_size, base_channels), seed)


def parameter_sq_norm(model: nn.Module) -> float:
    """Squared Frobenius norm of all parameters."""
    with torch.no_grad():
        return float(sum((p.double() ** 2).sum() for p in model.parameters()))
