"""Convolutional feature extractors with pooling and classifier heads removed."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ParameterError, ShapeError

ARCHITECTURES = ("desk-small", "paper-deep")


@dataclass(frozen=True)
class BackboneConfig:
    architecture: str = "desk-small"
    input_channels: int = 10
    descriptor_depth: int = 128
    input_size: tuple[int, int] = (64, 64)  # (H, W)
    bias: bool = True
    widths: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"architecture must be one of {ARCHITECTURES}")
        if self.input_channels < 1 or self.descriptor_depth < 1:
            raise ParameterError("channel counts must be positive")
        if self.architecture == "paper-deep" and self.descriptor_depth != 512:
            raise ParameterError("paper-deep produces 512-deep features")
        if self.architecture == "desk-small" and len(self.widths) != 3:
            raise ParameterError("desk-small takes three intermediate widths")

    @property
    def output_hw(self) -> tuple[int, int]:
        """Declared (h, w) of the feature map; every stage halves with ceil."""
        halvings = 4 if self.architecture == "desk-small" else 5
        h, w = self.input_size
        for _ in range(halvings):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w


@dataclass
class FeatureMap:
    values: torch.Tensor  # (B, D, h, w) or (D, h, w)

    @property
    def D(self) -> int:
        return self.values.shape[-3]

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])


def _desk_small(cfg: BackboneConfig) -> nn.Sequential:
    chans = (cfg.input_channels, *cfg.widths, cfg.descriptor_depth)
    layers = []
    for i in range(4):
        layers.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, bias=cfg.bias))
        layers.append(nn.BatchNorm2d(chans[i + 1], affine=cfg.bias))
        if i < 3:
            layers.append(nn.ReLU(inplace=False))
    return nn.Sequential(*layers)


def _resnet_trunk(cfg: BackboneConfig) -> nn.Sequential:
    from torchvision.models import resnet34

    net = resnet34(weights=None)
    net.conv1 = nn.Conv2d(cfg.input_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
    # avgpool and fc are dropped: the map goes straight to aggregation
    return nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                         net.layer1, net.layer2, net.layer3, net.layer4)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        self.features = _desk_small(config) if config.architecture == "desk-small" else _resnet_trunk(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"backbone expects (B, {self.config.input_channels}, H, W), got {tuple(x.shape)}"
            )
        return self.features(x)


def extract_features(grid: torch.Tensor, backbone: Backbone) -> FeatureMap:
    """Run the backbone on a (channels, H, W) or (B, channels, H, W) tensor."""
    single = grid.dim() == 3
    out = backbone(grid.unsqueeze(0) if single else grid)
    return FeatureMap(out[0] if single else out)
