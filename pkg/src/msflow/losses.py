"""Multi-scale multi-iteration training loss and evaluation metrics.

The loss sums a regularised L2 error over every (scale, iteration)
prediction, weighted so that later iterations and finer scales count
exponentially more.  A sample-wise robust variant raises each sample's mean
error to a power q < 1 before batch averaging, which down-weights samples
dominated by outliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import LossConfig


@dataclass(frozen=True)
class LossSchedule:
    """Per-(scale, iteration) loss weights.

    ``weights`` maps 1-based (scale, iteration) pairs to gamma**(I_tot - I)
    where I counts iterations across all scales in scale-major order; the
    very last prediction always has weight exactly 1.
    """

    gamma: float
    iters_per_scale: tuple[int, ...]
    total_iterations: int
    weights: dict

    def ordered_weights(self) -> list[float]:
        """Weights in scale-major, iteration-minor order (coarsest first)."""
        return [
            self.weights[(s, i)]
            for s, n in enumerate(self.iters_per_scale, start=1)
            for i in range(1, n + 1)
        ]


def schedule_weights(gamma: float, iters_per_scale) -> LossSchedule:
    """Build the exponential weight schedule for the given iteration split."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    iters_per_scale = tuple(int(n) for n in iters_per_scale)
    if any(n < 1 for n in iters_per_scale):
        raise ValueError(f"iteration counts must be >= 1, got {iters_per_scale}")

    total = sum(iters_per_scale)
    weights = {}
    done = 0
    for s, n in enumerate(iters_per_scale, start=1):
        for i in range(1, n + 1):
            weights[(s, i)] = gamma ** (total - (done + i))
        done += n
    return LossSchedule(
        gamma=gamma, iters_per_scale=iters_per_scale, total_iterations=total, weights=weights
    )


def _per_sample_means(pred, gt, valid_mask, eps):
    """Mean regularised endpoint norm per batch sample.

    pred, gt: (B, 2, H, W); valid_mask: optional (B, H, W) or (H, W) bool.
    """
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.ndim == 3:
        pred = pred[None]
        gt = gt[None]
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    err = torch.sqrt(((pred - gt) ** 2).sum(dim=1) + eps)  # (B, H, W)
    if valid_mask is None:
        return err.flatten(1).mean(dim=1)
    mask = torch.as_tensor(valid_mask, dtype=torch.bool)
    if mask.ndim == 2:
        mask = mask[None].expand(err.shape[0], -1, -1)
    counts = mask.flatten(1).sum(dim=1)
    if (counts == 0).any():
        raise ValueError("valid mask selects no pixels for at least one sample")
    masked = torch.where(mask, err, torch.zeros((), dtype=err.dtype))
    return masked.flatten(1).sum(dim=1) / counts.to(err.dtype)


def per_iteration_loss(pred, gt, valid_mask=None, eps: float = 1e-5):
    """Loss of a single prediction: per-sample pixel mean, then batch mean."""
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    return _per_sample_means(pred, gt, valid_mask, eps).mean()


def total_loss(predictions, gt, schedule: LossSchedule, loss_cfg: LossConfig, valid_mask=None):
    """Weighted sum over all per-iteration losses of an estimation trace.

    ``predictions`` must be in scale-major order matching the schedule.  In
    finetune mode each sample's inner pixel mean m becomes (m + eps')**q
    before batch averaging; pretrain mode uses m directly.
    """
    ordered = schedule.ordered_weights()
    if len(predictions) != len(ordered):
        raise ValueError(
            f"trace has {len(predictions)} predictions but schedule expects {len(ordered)}"
        )
    total = None
    for weight, pred in zip(ordered, predictions):
        means = _per_sample_means(pred, gt, valid_mask, loss_cfg.epsilon)
        if loss_cfg.robust_mode == "finetune":
            means = (means + loss_cfg.epsilon_prime) ** loss_cfg.q
        term = weight * means.mean()
        total = term if total is None else total + term
    return total


def epe(pred, gt, valid_mask=None):
    """Mean Euclidean end-point error over valid pixels."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    dist = torch.sqrt(((pred - gt) ** 2).sum(dim=-3))
    if valid_mask is None:
        return dist.mean().item()
    mask = torch.as_tensor(valid_mask, dtype=torch.bool)
    if mask.shape != dist.shape:
        mask = mask.expand_as(dist)
    if not mask.any():
        raise ValueError("valid mask selects no pixels")
    return dist[mask].mean().item()


def fl_rate(pred, gt, valid_mask=None):
    """Outlier percentage: error > 3 px and > 5% of the ground-truth magnitude."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    dist = torch.sqrt(((pred - gt) ** 2).sum(dim=-3))
    mag = torch.sqrt((gt**2).sum(dim=-3))
    outlier = (dist > 3.0) & (dist > 0.05 * mag)
    if valid_mask is None:
        return 100.0 * outlier.to(torch.float64).mean().item()
    mask = torch.as_tensor(valid_mask, dtype=torch.bool)
    if mask.shape != dist.shape:
        mask = mask.expand_as(dist)
    if not mask.any():
        raise ValueError("valid mask selects no pixels")
    return 100.0 * outlier[mask].to(torch.float64).mean().item()


def format_metrics(metrics: dict) -> str:
    """Render metrics as UTF-8 line-oriented ``name<TAB>value`` records."""
    return "".join(f"{name}\t{value}\n" for name, value in metrics.items())
