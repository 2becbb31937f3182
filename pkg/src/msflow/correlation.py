"""All-pairs cost volume, pooled correlation pyramid and bounded lookup.

The level-0 volume holds scaled dot products between every pixel pair of the
two feature grids; coarser levels are 2x2 average pools over the target
dimensions and encode non-local match costs.  Lookup samples a square
neighborhood around the flow-displaced position at every level and
concatenates the results level-major, giving the recurrent update block both
local and non-local evidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def build_cost_volume(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """Pairwise feature correlations, scaled by 1/sqrt(channels).

    f1, f2: (B, D, H, W) feature grids of the same shape.
    Returns (B, H, W, H, W) with entry (i, j, k, l) = <f1[:, i, j], f2[:, k, l]> / sqrt(D).
    """
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    batch, dim, h, w = f1.shape
    corr = torch.matmul(f1.reshape(batch, dim, h * w).transpose(1, 2), f2.reshape(batch, dim, h * w))
    corr = corr.reshape(batch, h, w, h, w)
    return corr / dim**0.5


@dataclass
class CorrelationPyramid:
    """Pooled match-cost volumes for one scale.

    levels[l] has shape (B, H, W, H/2^l, W/2^l); level 0 is the raw volume.
    Immutable after construction; lookup does not mutate.
    """

    levels: list
    scale_stride: int = 1

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def base_shape(self):
        return tuple(self.levels[0].shape[1:3])


def build_pyramid(volume: torch.Tensor, num_levels: int, scale_stride: int = 1) -> CorrelationPyramid:
    """Pool the target dimensions of ``volume`` ``num_levels - 1`` times by 2x2 averaging."""
    if num_levels < 1:
        raise ValueError(f"num_levels must be >= 1, got {num_levels}")
    batch, h1, w1, h2, w2 = volume.shape
    factor = 2 ** (num_levels - 1)
    if h2 % factor or w2 % factor:
        raise ValueError(
            f"target dims ({h2}, {w2}) not divisible by 2^{num_levels - 1} for {num_levels} levels"
        )
    levels = [volume]
    pooled = volume.reshape(batch * h1 * w1, 1, h2, w2)
    for _ in range(num_levels - 1):
        pooled = F.avg_pool2d(pooled, kernel_size=2, stride=2)
        levels.append(pooled.reshape(batch, h1, w1, *pooled.shape[-2:]))
    return CorrelationPyramid(levels=levels, scale_stride=scale_stride)


def lookup(pyramid: CorrelationPyramid, flow: torch.Tensor, radius: int) -> torch.Tensor:
    """Sample correlations around the flow-displaced position at every level.

    For pixel x and level l the sampled coordinates are
    (x + flow(x)) / 2^l + delta for all integer offsets with |delta|_inf <=
    radius, read bilinearly with out-of-domain values taken as zero.  Offsets
    run row-major (dy outer, dx inner); levels are concatenated level-major.

    flow: (B, 2, H, W) with channel 0 the x-displacement.
    Returns (B, num_levels * (2*radius+1)**2, H, W).
    """
    batch, two, h, w = flow.shape
    if two != 2:
        raise ValueError(f"flow must have 2 channels, got {two}")
    if (h, w) != pyramid.base_shape or flow.shape[0] != pyramid.levels[0].shape[0]:
        raise ValueError(
            f"flow grid {tuple(flow.shape)} does not match pyramid base "
            f"{pyramid.levels[0].shape[:3]}"
        )
    side = 2 * radius + 1
    dtype, device = flow.dtype, flow.device

    ys = torch.arange(h, dtype=dtype, device=device)
    xs = torch.arange(w, dtype=dtype, device=device)
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    target_x = grid_x + flow[:, 0]
    target_y = grid_y + flow[:, 1]

    offs = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    off_y, off_x = torch.meshgrid(offs, offs, indexing="ij")
    off_x = off_x.reshape(1, side * side, 1, 1)
    off_y = off_y.reshape(1, side * side, 1, 1)

    out = []
    for lvl, volume in enumerate(pyramid.levels):
        h2, w2 = volume.shape[-2:]
        sample_x = target_x[:, None] / 2**lvl + off_x  # (B, side^2, H, W)
        sample_y = target_y[:, None] / 2**lvl + off_y
        # Normalised coordinates for grid_sample; max(dim-1, 1) guards 1-wide levels.
        norm_x = 2.0 * sample_x / max(w2 - 1, 1) - 1.0
        norm_y = 2.0 * sample_y / max(h2 - 1, 1) - 1.0
        coords = torch.stack((norm_x, norm_y), dim=-1).reshape(batch, side * side * h, w, 2)
        vol = volume.reshape(batch, h * w, h2, w2).reshape(batch * h * w, 1, h2, w2)
        # One sampling call per level: fold the per-pixel neighborhood into
        # the batch dim so each pixel samples from its own 2D cost slice.
        coords = coords.reshape(batch, side * side, h, w, 2).permute(0, 2, 3, 1, 4)
        coords = coords.reshape(batch * h * w, 1, side * side, 2)
        sampled = F.grid_sample(
            vol, coords, mode="bilinear", padding_mode="zeros", align_corners=True
        )
        out.append(sampled.reshape(batch, h, w, side * side))
    corr = torch.cat(out, dim=-1)
    return corr.permute(0, 3, 1, 2).contiguous()
