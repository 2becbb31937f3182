"""Coarse-to-fine estimation: per-scale correlation pyramids, recurrent
refinement, learned 2x upsampling between scales and to full resolution.

Estimation starts from zero flow at the coarsest scale (or a warm start
projected from the previous pair), runs the shared update block for a fixed
number of iterations per scale, hands the result to the next finer scale
through convex upsampling, and finally interpolates the finest flow to the
input resolution (2x convex upsampling followed by 2x bilinear).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, validate_config
from .correlation import build_cost_volume, build_pyramid, lookup
from .features import FeatureNetwork
from .update import UpdateBlock, convex_upsample, init_state, mask_weights


@dataclass
class EstimationTrace:
    """Every intermediate prediction of one estimation run.

    predictions: full-resolution flow per (scale, iteration), scale-major
    with the coarsest scale first; final: the last entry, which is also the
    model output; per_scale_flows: the last flow at each scale's native
    resolution; scale_inits and scale_masks record the initialization used
    at each scale and the last upsampling mask produced there.
    """

    predictions: list
    final: torch.Tensor
    per_scale_flows: list
    scale_inits: list
    scale_masks: list


def upsample_to_full(flow: torch.Tensor, mask: torch.Tensor, full_hw) -> torch.Tensor:
    """Lift a native-scale flow to input resolution.

    One 2x convex upsampling with the iteration's mask, then bilinear
    interpolation by the remaining factor with displacement values scaled by
    that factor.
    """
    up = convex_upsample(flow, mask)
    full_h, full_w = full_hw
    h, w = up.shape[-2:]
    if (full_h, full_w) == (h, w):
        return up
    if full_h % h or full_w % w or full_h // h != full_w // w:
        raise ValueError(f"cannot upsample ({h}, {w}) to ({full_h}, {full_w}) uniformly")
    factor = full_h // h
    return factor * F.interpolate(up, size=(full_h, full_w), mode="bilinear", align_corners=True)


def warm_init(previous: torch.Tensor, coarsest_hw) -> torch.Tensor:
    """Project a previous full-resolution result to the coarsest grid.

    The flow is area-averaged down to the coarsest dims with values divided
    by the stride, then forward-projected: each source pixel writes its
    value to the pixel nearest to (x + flow(x)); on collision the larger
    magnitude wins and unwritten pixels stay zero.
    """
    if previous.ndim == 3:
        previous = previous[None]
    batch, _, full_h, full_w = previous.shape
    h, w = coarsest_hw
    if full_h % h or full_w % w or full_h // h != full_w // w:
        raise ValueError(f"full dims ({full_h}, {full_w}) not a multiple of coarsest ({h}, {w})")
    stride = full_h // h
    coarse = F.avg_pool2d(previous, kernel_size=stride, stride=stride) / stride

    out = torch.zeros_like(coarse)
    mag = coarse.square().sum(dim=1).sqrt()
    for b in range(batch):
        # Ascending magnitude order so larger-magnitude writes land last.
        order = torch.argsort(mag[b].reshape(-1), stable=True)
        src_i = order // w
        src_j = order % w
        tgt_j = torch.round(src_j + coarse[b, 0, src_i, src_j]).long()
        tgt_i = torch.round(src_i + coarse[b, 1, src_i, src_j]).long()
        inside = (tgt_i >= 0) & (tgt_i < h) & (tgt_j >= 0) & (tgt_j < w)
        for si, sj, ti, tj in zip(
            src_i[inside].tolist(), src_j[inside].tolist(),
            tgt_i[inside].tolist(), tgt_j[inside].tolist(),
        ):
            out[b, :, ti, tj] = coarse[b, :, si, sj]
    return out


class MultiScaleFlowNet(nn.Module):
    """Recurrent coarse-to-fine flow estimator with a shared matching block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        validate_config(cfg)
        self.cfg = cfg
        self.features = FeatureNetwork(cfg)
        side = 2 * cfg.lookup_radius + 1
        self.corr_channels = cfg.max_lookup_levels * side * side
        self.update = UpdateBlock(self.corr_channels, cfg.hidden_channels, cfg.input_channels)

    def forward(self, image1: torch.Tensor, image2: torch.Tensor, iters, warm=None) -> EstimationTrace:
        cfg = self.cfg
        if image1.ndim == 3:
            image1 = image1[None]
            image2 = image2[None]
        if image1.shape != image2.shape:
            raise ValueError(
                f"frame shapes differ: {tuple(image1.shape)} vs {tuple(image2.shape)}"
            )
        iters = tuple(int(n) for n in iters)
        if len(iters) != cfg.num_scales:
            raise ValueError(f"need {cfg.num_scales} iteration counts, got {len(iters)}")
        if any(n < 1 for n in iters):
            raise ValueError(f"iteration counts must be >= 1, got {iters}")
        full_h, full_w = image1.shape[-2:]
        coarsest = cfg.stride(1)
        if full_h % coarsest or full_w % coarsest:
            raise ValueError(
                f"image size ({full_h}, {full_w}) not divisible by the coarsest stride {coarsest}"
            )

        pyr1, pyr2, context = self.features(2 * image1 - 1, 2 * image2 - 1)

        if warm is not None:
            flow = warm_init(warm.to(image1.dtype), (full_h // coarsest, full_w // coarsest))
        else:
            flow = torch.zeros(
                image1.shape[0], 2, full_h // coarsest, full_w // coarsest,
                dtype=image1.dtype, device=image1.device,
            )

        predictions = []
        per_scale_flows = []
        scale_inits = []
        scale_masks = []
        mask = None
        for s in range(cfg.num_scales):
            pyramid = build_pyramid(
                build_cost_volume(pyr1[s], pyr2[s]), cfg.levels_at(s + 1), cfg.stride(s + 1)
            )
            hidden, inp = init_state(context[s], cfg.hidden_channels)
            scale_inits.append(flow)
            for _ in range(iters[s]):
                flow = flow.detach()
                corr = lookup(pyramid, flow, cfg.lookup_radius)
                if corr.shape[1] < self.corr_channels:
                    # Scales configured with fewer lookup levels feed the
                    # shared block zeros for the missing coarser levels.
                    pad = corr.new_zeros(
                        corr.shape[0], self.corr_channels - corr.shape[1], *corr.shape[-2:]
                    )
                    corr = torch.cat((corr, pad), dim=1)
                hidden, delta, mask_logits = self.update(hidden, inp, corr, flow)
                flow = flow + delta
                mask = mask_weights(mask_logits)
                predictions.append(upsample_to_full(flow, mask, (full_h, full_w)))
            per_scale_flows.append(flow)
            if s + 1 < cfg.num_scales:
                flow = convex_upsample(flow, mask).detach()
            scale_masks.append(mask)

        return EstimationTrace(
            predictions=predictions,
            final=predictions[-1],
            per_scale_flows=per_scale_flows,
            scale_inits=scale_inits,
            scale_masks=scale_masks,
        )

    estimate = forward


# --- checkpoints -------------------------------------------------------------

MANIFEST_KEY = "__manifest__"


def save_checkpoint(path, model: MultiScaleFlowNet, extra: dict | None = None) -> None:
    """Write weights and the model config to a single npz archive.

    Parameter names (dotted module paths) map to little-endian float32
    arrays; the manifest entry holds the config as JSON.
    """
    manifest = {"model_config": _config_to_dict(model.cfg)}
    if extra:
        manifest.update(extra)
    arrays = {
        name: tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in model.state_dict().items()
    }
    arrays[MANIFEST_KEY] = np.array(json.dumps(manifest))
    np.savez(path, **arrays)


def load_checkpoint(path, expected_cfg: ModelConfig | None = None):
    """Read a checkpoint archive; returns (model, manifest).

    When ``expected_cfg`` is given it must match the stored config exactly.
    """
    with np.load(path, allow_pickle=False) as archive:
        if MANIFEST_KEY not in archive:
            raise ValueError(f"{path}: not a checkpoint archive (missing manifest)")
        manifest = json.loads(str(archive[MANIFEST_KEY]))
        arrays = {name: archive[name] for name in archive.files if name != MANIFEST_KEY}
    cfg = _config_from_dict(manifest["model_config"])
    if expected_cfg is not None and expected_cfg != cfg:
        raise ValueError(
            f"checkpoint config {cfg} does not match requested architecture {expected_cfg}"
        )
    model = MultiScaleFlowNet(cfg)
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model, manifest


def _config_to_dict(cfg: ModelConfig) -> dict:
    out = {}
    for f in fields(ModelConfig):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _config_from_dict(values: dict) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name in values:
            value = values[f.name]
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
    return ModelConfig(**kwargs)
