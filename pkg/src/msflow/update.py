"""Shared recurrent matching block and learned 2x convex upsampling.

One update block serves every scale: a motion encoder summarises looked-up
correlations and the current flow, a convolutional gated recurrent unit
folds them into the hidden state, and two heads emit the flow increment and
the upsampling mask.  Context features are split once per scale into the
tanh-bounded initial hidden state and a static rectified input.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def init_state(context_level: torch.Tensor, hidden_channels: int):
    """Split a context-feature grid into (hidden, inp).

    The first ``hidden_channels`` channels pass through tanh and become the
    initial hidden state; the rest pass through a rectifier and stay fixed
    as per-iteration input.
    """
    channels = context_level.shape[-3]
    if not 0 < hidden_channels < channels:
        raise ValueError(
            f"hidden_channels={hidden_channels} must split {channels} context channels"
        )
    hidden, inp = torch.split(
        context_level, (hidden_channels, channels - hidden_channels), dim=-3
    )
    return torch.tanh(hidden), torch.relu(inp)


class MotionEncoder(nn.Module):
    """Fuses correlation lookups and the current flow into motion features.

    Two branches (correlation, flow) are concatenated and fused to 126
    channels; the raw 2-channel flow is appended, giving 128 outputs.
    """

    def __init__(self, corr_channels: int):
        super().__init__()
        self.convc1 = nn.Conv2d(corr_channels, 256, kernel_size=1)
        self.convc2 = nn.Conv2d(256, 192, kernel_size=3, padding=1)
        self.convf1 = nn.Conv2d(2, 128, kernel_size=7, padding=3)
        self.convf2 = nn.Conv2d(128, 64, kernel_size=3, padding=1)
        self.conv = nn.Conv2d(192 + 64, 126, kernel_size=3, padding=1)
        self.out_channels = 128

    def forward(self, corr, flow):
        c = F.relu(self.convc1(corr))
        c = F.relu(self.convc2(c))
        f = F.relu(self.convf1(flow))
        f = F.relu(self.convf2(f))
        m = F.relu(self.conv(torch.cat((c, f), dim=1)))
        return torch.cat((m, flow), dim=1)


class ConvGRU(nn.Module):
    """3x3 convolutional gated recurrent unit (update/reset/candidate gates)."""

    def __init__(self, hidden_channels: int, input_channels: int):
        super().__init__()
        total = hidden_channels + input_channels
        self.convz = nn.Conv2d(total, hidden_channels, kernel_size=3, padding=1)
        self.convr = nn.Conv2d(total, hidden_channels, kernel_size=3, padding=1)
        self.convq = nn.Conv2d(total, hidden_channels, kernel_size=3, padding=1)

    def forward(self, hidden, x):
        hx = torch.cat((hidden, x), dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat((r * hidden, x), dim=1)))
        return (1 - z) * hidden + z * q


class FlowHead(nn.Module):
    def __init__(self, hidden_channels: int, mid_channels: int = 256):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden_channels, mid_channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(mid_channels, 2, kernel_size=3, padding=1)

    def forward(self, hidden):
        return self.conv2(F.relu(self.conv1(hidden)))


class MaskHead(nn.Module):
    """Predicts 2x convex-upsampling logits: 4 sub-pixels x 9 neighbors."""

    def __init__(self, hidden_channels: int, mid_channels: int = 256):
        super().__init__()
        self.conv1 = nn.Conv2d(hidden_channels, mid_channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(mid_channels, 4 * 9, kernel_size=1)

    def forward(self, hidden):
        return self.conv2(F.relu(self.conv1(hidden)))


class UpdateBlock(nn.Module):
    """One recurrent step: motion encoding, GRU update, flow and mask heads."""

    def __init__(self, corr_channels: int, hidden_channels: int, input_channels: int):
        super().__init__()
        self.motion = MotionEncoder(corr_channels)
        self.gru = ConvGRU(hidden_channels, self.motion.out_channels + input_channels)
        self.flow_head = FlowHead(hidden_channels)
        self.mask_head = MaskHead(hidden_channels)

    def forward(self, hidden, inp, corr, flow):
        if hidden.shape[-2:] != corr.shape[-2:] or hidden.shape[-2:] != flow.shape[-2:]:
            raise ValueError(
                f"spatial dims differ: hidden {tuple(hidden.shape[-2:])}, "
                f"corr {tuple(corr.shape[-2:])}, flow {tuple(flow.shape[-2:])}"
            )
        motion = self.motion(corr, flow)
        hidden = self.gru(hidden, torch.cat((motion, inp), dim=1))
        delta_flow = self.flow_head(hidden)
        mask_logits = self.mask_head(hidden)
        return hidden, delta_flow, mask_logits


def mask_weights(logits: torch.Tensor) -> torch.Tensor:
    """Softmax-normalise upsampling logits over the 9-neighbor axis.

    logits: (B, 36, H, W) with channel sub*9 + k; the returned weights are
    nonnegative and sum to one per (sub-pixel, position).
    """
    b, c, h, w = logits.shape
    if c != 36:
        raise ValueError(f"expected 36 mask channels (4 sub-pixels x 9 neighbors), got {c}")
    return torch.softmax(logits.reshape(b, 4, 9, h, w), dim=2).reshape(b, 36, h, w)


def convex_upsample(flow: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Double the resolution of a flow field via learned convex combinations.

    Each fine pixel mixes the 3x3 coarse neighborhood of its parent with the
    mask weights for its sub-pixel; displacement values double with the
    resolution.  Border neighborhoods replicate the edge so constant fields
    stay constant everywhere.
    """
    b, two, h, w = flow.shape
    if two != 2:
        raise ValueError(f"flow must have 2 channels, got {two}")
    if mask.shape != (b, 36, h, w):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match flow grid ({b}, 36, {h}, {w})")
    weights = mask.reshape(b, 2, 2, 9, h, w)
    neighbors = F.unfold(F.pad(2.0 * flow, (1, 1, 1, 1), mode="replicate"), kernel_size=3)
    neighbors = neighbors.reshape(b, 2, 9, h, w)
    up = torch.einsum("bpqkhw,bckhw->bchpwq", weights, neighbors)
    return up.reshape(b, 2, 2 * h, 2 * w)
