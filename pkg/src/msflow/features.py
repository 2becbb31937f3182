"""Per-scale image and context features via a residual encoder with
U-Net-style enhancement.

The encoder stem halves the resolution once; one residual downsampling unit
reaches the finest scale (stride 4) and each further unit adds a coarser
scale.  Enhancement then walks coarse to fine, concatenating the upsampled
coarser result with the better localized intermediate features of the
current scale and aggregating through a residual unit.  The coarsest scale
passes through unchanged since it has no coarser neighbor.

Image features use instance normalization; context features use none.  The
image extractor is applied to both frames with shared weights, the context
extractor to the first frame only.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


def _make_norm(kind: str, channels: int):
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "none":
        return nn.Identity()
    raise ValueError(f"unknown norm kind {kind!r}")


class ResidualUnit(nn.Module):
    """Two 3x3 convolutions with a skip connection.

    Downsampling units use stride 2 on the first convolution; the skip path
    gets a 1x1 projection whenever shape or channel count changes.
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, norm: str = "instance"):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        self.norm1 = _make_norm(norm, out_channels)
        self.norm2 = _make_norm(norm, out_channels)
        if stride != 1 or in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride)
        else:
            self.skip = None

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = F.relu(self.norm2(self.conv2(y)))
        if self.skip is not None:
            x = self.skip(x)
        return F.relu(x + y)


class EnhancementBlock(nn.Module):
    """Merge the upsampled coarser level into the current intermediate level.

    The coarser features are 2x bilinearly upsampled, projected by a 1x1
    convolution to the current channel count, concatenated with the
    intermediate features and aggregated by a residual unit.
    """

    def __init__(self, coarser_channels: int, channels: int, norm: str):
        super().__init__()
        self.project = nn.Conv2d(coarser_channels, channels, kernel_size=1)
        self.aggregate = ResidualUnit(2 * channels, channels, stride=1, norm=norm)

    def forward(self, coarser, intermediate):
        up = F.interpolate(
            coarser, size=intermediate.shape[-2:], mode="bilinear", align_corners=True
        )
        return self.aggregate(torch.cat((self.project(up), intermediate), dim=1))


class FeatureExtractor(nn.Module):
    """Encoder plus enhancement for one feature kind (image or context).

    ``channels`` lists the per-scale output widths coarsest first; the
    intermediate encoder levels already carry these widths so the coarsest
    enhanced level is the raw encoder output.
    """

    def __init__(self, channels, norm: str = "instance", stem_channels: int = 64):
        super().__init__()
        self.channels = tuple(channels)
        self.num_scales = len(self.channels)
        finest_first = self.channels[::-1]

        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_channels, kernel_size=7, stride=2, padding=3),
            _make_norm(norm, stem_channels),
            nn.ReLU(inplace=True),
            ResidualUnit(stem_channels, stem_channels, stride=1, norm=norm),
        )
        downs = []
        prev = stem_channels
        for ch in finest_first:
            downs.append(ResidualUnit(prev, ch, stride=2, norm=norm))
            prev = ch
        self.downs = nn.ModuleList(downs)

        enhancers = []
        for idx in range(1, self.num_scales):
            enhancers.append(
                EnhancementBlock(self.channels[idx - 1], self.channels[idx], norm)
            )
        self.enhancers = nn.ModuleList(enhancers)

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.constant_(m.bias, 0)

    def encode(self, image: torch.Tensor) -> list:
        """Raw per-scale encoder outputs, coarsest first.

        The input height and width must be divisible by the coarsest stride
        (4 * 2**(num_scales - 1)).
        """
        h, w = image.shape[-2:]
        coarsest = 4 * 2 ** (self.num_scales - 1)
        if h % coarsest or w % coarsest:
            raise ValueError(
                f"image size ({h}, {w}) not divisible by the coarsest stride {coarsest}"
            )
        x = self.stem(image)
        finest_first = []
        for down in self.downs:
            x = down(x)
            finest_first.append(x)
        return finest_first[::-1]

    def enhance(self, intermediates: list) -> list:
        """Enhanced pyramid from raw encoder outputs, coarsest first."""
        if len(intermediates) != self.num_scales:
            raise ValueError(
                f"expected {self.num_scales} intermediate levels, got {len(intermediates)}"
            )
        levels = [intermediates[0]]
        for idx in range(1, self.num_scales):
            levels.append(self.enhancers[idx - 1](levels[-1], intermediates[idx]))
        return levels

    def forward(self, image: torch.Tensor) -> list:
        return self.enhance(self.encode(image))


class FeatureNetwork(nn.Module):
    """Weight-shared image extractor for both frames plus a context extractor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.image_net = FeatureExtractor(cfg.image_channels, norm="instance")
        self.context_net = FeatureExtractor(
            (cfg.context_channels,) * cfg.num_scales, norm="none"
        )

    def extract(self, image1: torch.Tensor, image2: torch.Tensor):
        """Image pyramids for both frames and the context pyramid for frame 1."""
        if image1.shape != image2.shape:
            raise ValueError(
                f"frame shapes differ: {tuple(image1.shape)} vs {tuple(image2.shape)}"
            )
        pyr1 = self.image_net(image1)
        pyr2 = self.image_net(image2)
        context = self.context_net(image1)
        return pyr1, pyr2, context

    forward = extract
