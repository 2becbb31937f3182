"""Matplotlib figures written next to the delimited metric logs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import flow_to_color


def save_training_curves(rows, path) -> None:
    """Plot logged series (loss, epe, lr, ...) against the step column.

    rows: iterable of (step, name, value) records, as written to the
    metric log.
    """
    series = {}
    for step, name, value in rows:
        series.setdefault(name, ([], []))
        series[name][0].append(int(step))
        series[name][1].append(float(value))
    names = [n for n in ("loss", "epe") if n in series] or sorted(series)
    fig, axes = plt.subplots(1, len(names), figsize=(5.2 * len(names), 3.6))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        steps, values = series[name]
        ax.plot(steps, values, lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        if name == "loss" and min(values) > 0:
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_flow_panel(pred_flow, gt_flow=None, image=None, path=None, title=None) -> None:
    """Side-by-side color-wheel rendering of predicted (and true) flow."""
    panels = []
    if image is not None:
        panels.append(("frame 1", np.asarray(image).transpose(1, 2, 0)))
    rad = None
    if gt_flow is not None:
        gt_flow = np.asarray(gt_flow)
        rad = float(np.sqrt((gt_flow**2).sum(axis=0)).max())
    panels.append(("prediction", flow_to_color(np.asarray(pred_flow), max_rad=rad)))
    if gt_flow is not None:
        panels.append(("ground truth", flow_to_color(gt_flow, max_rad=rad)))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.4 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (label, img) in zip(axes, panels):
        ax.imshow(img)
        ax.set_title(label, fontsize=9)
        ax.set_axis_off()
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_epe_histogram(per_sample_epe, path) -> None:
    values = np.asarray(list(per_sample_epe), dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    ax.hist(values, bins=min(20, max(3, values.size)), edgecolor="black", alpha=0.8)
    ax.set_xlabel("end-point error [px]")
    ax.set_ylabel("samples")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
