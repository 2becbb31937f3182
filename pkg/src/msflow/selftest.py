"""Built-in verification battery: oracle equivalence, invariants and
gradient checks, runnable from the command line.

Each check raises CheckFailure with the offending inputs in the message;
the runner reports one pass/fail line per check.  Gradient checks run in
double precision.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np
import torch

from . import reference as ref
from .config import ConfigError, IterationSchedule, LossConfig, ModelConfig, validate_config
from .correlation import build_cost_volume, build_pyramid, lookup
from .data import SyntheticSpec, generate, read_flo, write_flo, read_kitti_png, write_kitti_png
from .losses import LossSchedule, epe, fl_rate, per_iteration_loss, schedule_weights, total_loss
from .pipeline import MultiScaleFlowNet, warm_init
from .update import convex_upsample, mask_weights


class CheckFailure(AssertionError):
    pass


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _require(condition: bool, message: str):
    if not condition:
        raise CheckFailure(message)


def check_weight_schedule(schedule: LossSchedule | None = None):
    """Exponential weight law for gamma=0.8, iters (4, 6, 8)."""
    if schedule is None:
        schedule = schedule_weights(0.8, (4, 6, 8))
    ordered = schedule.ordered_weights()
    _require(
        ordered[-1] == 1.0,
        f"final weight must be exactly 1.0, got {ordered[-1]!r} "
        f"(gamma={schedule.gamma}, iters={schedule.iters_per_scale})",
    )
    inv_gamma = 1.0 / schedule.gamma
    for idx in range(len(ordered) - 1):
        ratio = ordered[idx + 1] / ordered[idx]
        _require(
            abs(ratio - inv_gamma) < 1e-9,
            f"weight ratio at position {idx} is {ratio!r}, expected {inv_gamma!r} "
            f"(weights {ordered[idx]!r} -> {ordered[idx + 1]!r})",
        )
    first = schedule.weights[(1, 1)]
    expected = schedule.gamma ** (schedule.total_iterations - 1)
    _require(
        abs(first - expected) < 1e-12,
        f"weight(1,1) is {first!r}, expected gamma**(I_tot-1) = {expected!r}",
    )
    _require(
        schedule.total_iterations == sum(schedule.iters_per_scale),
        f"total_iterations {schedule.total_iterations} != sum {sum(schedule.iters_per_scale)}",
    )


def check_loss_values():
    """Worked loss examples from direct arithmetic."""
    eps = 1e-5
    pred = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
    gt = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
    pred[0, :, 0, 0] = torch.tensor([3.0, 4.0])
    value = per_iteration_loss(pred, gt, eps=eps).item()
    expected = (math.sqrt(25 + eps) + math.sqrt(eps)) / 2
    _require(
        abs(value - expected) < 1e-5,
        f"two-pixel loss {value!r} != {expected!r} (errors (3,4) and (0,0))",
    )

    exact = per_iteration_loss(gt, gt, eps=eps).item()
    _require(abs(exact - math.sqrt(eps)) < 1e-12, f"zero-error loss {exact!r} != sqrt(eps)")

    sched = schedule_weights(0.8, (1,))
    fine = total_loss([gt], gt, sched, LossConfig(robust_mode="finetune")).item()
    expected = (math.sqrt(eps) + 0.01) ** 0.7
    _require(
        abs(fine - expected) < 1e-6,
        f"finetune zero-error loss {fine!r} != (sqrt(1e-5)+0.01)**0.7 = {expected!r}",
    )

    # q=1, eps'=0 reduces finetune to pretrain exactly.
    rng = np.random.default_rng(11)
    preds = [torch.tensor(rng.standard_normal((2, 2, 3, 3)))]
    gt2 = torch.tensor(rng.standard_normal((2, 2, 3, 3)))
    a = total_loss(preds, gt2, sched, LossConfig(robust_mode="pretrain")).item()
    b = total_loss(preds, gt2, sched, LossConfig(robust_mode="finetune", q=1.0, epsilon_prime=0.0)).item()
    _require(abs(a - b) < 1e-12, f"finetune(q=1, eps'=0) {b!r} != pretrain {a!r}")


def check_metric_values():
    """End-point error and outlier-rate rule cases."""
    pred = torch.tensor([[[3.0]], [[4.0]]])
    gt = torch.zeros(2, 1, 1)
    _require(epe(pred, gt) == 5.0, f"epe((3,4) vs (0,0)) = {epe(pred, gt)!r}, expected 5.0")
    _require(epe(gt, gt) == 0.0, "epe of identical fields must be 0")

    gt_mag100 = torch.zeros(2, 1, 1)
    gt_mag100[0] = 100.0
    pred4 = gt_mag100.clone()
    pred4[1] = 4.0
    _require(fl_rate(pred4, gt_mag100) == 0.0, "error 4 px at magnitude 100 must not be an outlier")
    gt_mag10 = torch.zeros(2, 1, 1)
    gt_mag10[0] = 10.0
    pred4 = gt_mag10.clone()
    pred4[1] = 4.0
    _require(fl_rate(pred4, gt_mag10) == 100.0, "error 4 px at magnitude 10 must be an outlier")
    _require(fl_rate(gt_mag10, gt_mag10) == 0.0, "exact prediction must have 0% outliers")


def check_cost_volume_oracle():
    """All-pairs correlations match the brute-force double loop (8x8, D=4)."""
    rng = np.random.default_rng(101)
    f1 = rng.standard_normal((4, 8, 8))
    f2 = rng.standard_normal((4, 8, 8))
    fast = build_cost_volume(torch.tensor(f1[None]), torch.tensor(f2[None]))[0].numpy()
    slow = ref.cost_volume_bruteforce(f1, f2)
    err = np.abs(fast - slow).max()
    _require(err < 1e-6, f"cost volume deviates from brute force by {err} (seed 101, 8x8 D=4)")
    # Symmetry: swapping the inputs transposes the pixel-pair axes.
    swapped = build_cost_volume(torch.tensor(f2[None]), torch.tensor(f1[None]))[0].numpy()
    err = np.abs(fast - swapped.transpose(2, 3, 0, 1)).max()
    _require(err < 1e-12, f"cost volume symmetry violated by {err}")


def check_pyramid_oracle():
    """Pooled levels match brute force and preserve constants."""
    rng = np.random.default_rng(102)
    vol = torch.tensor(rng.standard_normal((1, 4, 4, 8, 8)))
    pyramid = build_pyramid(vol, 3)
    want = ref.avg_pool_bruteforce(vol[0].numpy())
    err = np.abs(pyramid.levels[1][0].numpy() - want).max()
    _require(err < 1e-6, f"level-1 pooling deviates from brute force by {err}")
    want = ref.avg_pool_bruteforce(want)
    err = np.abs(pyramid.levels[2][0].numpy() - want).max()
    _require(err < 1e-6, f"level-2 pooling deviates from brute force by {err}")

    const = build_pyramid(torch.full((1, 2, 2, 4, 4), 3.25), 3)
    for lvl, level in enumerate(const.levels):
        _require(
            bool((level == 3.25).all()),
            f"pooling does not preserve the constant 3.25 at level {lvl}",
        )


def check_lookup_oracle():
    """Bounded lookup matches the brute-force bilinear sampler (8x8, D=4)."""
    rng = np.random.default_rng(103)
    f1 = torch.tensor(rng.standard_normal((1, 4, 8, 8)))
    f2 = torch.tensor(rng.standard_normal((1, 4, 8, 8)))
    pyramid = build_pyramid(build_cost_volume(f1, f2), 2)
    flow = rng.uniform(-3.0, 3.0, size=(2, 8, 8))
    fast = lookup(pyramid, torch.tensor(flow[None]), radius=4)[0].numpy()
    slow = ref.lookup_bruteforce([lvl[0].numpy() for lvl in pyramid.levels], flow, 4)
    err = np.abs(fast - slow).max()
    _require(err < 1e-6, f"lookup deviates from brute force by {err} (seed 103, radius 4)")
    _require(
        fast.shape[0] == 2 * 81,
        f"lookup channels {fast.shape[0]} != levels*(2r+1)^2 = {2 * 81}",
    )


def check_lookup_gradient():
    """Analytic lookup gradients w.r.t. flow match central differences."""
    rng = np.random.default_rng(104)
    f1 = torch.tensor(rng.standard_normal((1, 3, 4, 4)))
    f2 = torch.tensor(rng.standard_normal((1, 3, 4, 4)))
    pyramid = build_pyramid(build_cost_volume(f1, f2), 2)
    weights = torch.tensor(rng.standard_normal((1, 2 * 9, 4, 4)))
    flow0 = rng.uniform(-0.9, 0.9, size=(2, 4, 4)) + 0.3  # off the integer lattice

    def scalar(x):
        t = torch.tensor(x[None], dtype=torch.float64)
        return (lookup(pyramid, t, 1) * weights).sum().item()

    t = torch.tensor(flow0[None], dtype=torch.float64, requires_grad=True)
    (lookup(pyramid, t, 1) * weights).sum().backward()
    numeric = ref.central_difference_gradient(scalar, flow0.copy())
    err = ref.relative_gradient_error(t.grad[0].numpy(), numeric)
    _require(err < 1e-4, f"lookup flow-gradient relative error {err} (seed 104, 4x4 grid)")


def check_convex_upsample():
    """Mask normalisation, constant mapping, nearest oracle and gradients."""
    rng = np.random.default_rng(105)
    logits = torch.tensor(rng.standard_normal((1, 36, 4, 4)))
    mask = mask_weights(logits)
    sums = mask.reshape(1, 4, 9, 4, 4).sum(dim=2)
    err = (sums - 1.0).abs().max().item()
    _require(err < 1e-6, f"mask rows deviate from sum 1 by {err}")
    _require(mask.min().item() >= 0.0, f"mask has negative weight {mask.min().item()}")

    const = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    const[:, 0], const[:, 1] = 1.5, -2.0
    up = convex_upsample(const, mask.to(torch.float64))
    err = max((up[:, 0] - 3.0).abs().max().item(), (up[:, 1] + 4.0).abs().max().item())
    _require(err < 1e-12, f"constant (1.5, -2.0) maps off (3.0, -4.0) by {err}")

    flow = rng.standard_normal((2, 4, 4))
    onehot = torch.zeros(1, 36, 4, 4, dtype=torch.float64)
    for sub in range(4):
        onehot[:, sub * 9 + 4] = 1.0
    up = convex_upsample(torch.tensor(flow[None]), onehot)[0].numpy()
    want = ref.nearest_upsample2x_bruteforce(flow)
    err = np.abs(up - want).max()
    _require(err < 1e-12, f"one-hot center mask deviates from nearest-neighbor oracle by {err}")

    # Gradients w.r.t. flow and mask logits.
    probe = torch.tensor(rng.standard_normal((1, 2, 8, 8)))
    flow0 = rng.standard_normal((2, 4, 4))
    logits0 = rng.standard_normal((36, 4, 4))

    def scalar(fl, lg):
        tf = torch.tensor(fl[None], dtype=torch.float64)
        tl = torch.tensor(lg[None], dtype=torch.float64)
        return (convex_upsample(tf, mask_weights(tl)) * probe).sum()

    tf = torch.tensor(flow0[None], requires_grad=True)
    tl = torch.tensor(logits0[None], requires_grad=True)
    (convex_upsample(tf, mask_weights(tl)) * probe).sum().backward()
    numeric_f = ref.central_difference_gradient(lambda x: scalar(x, logits0).item(), flow0.copy())
    numeric_l = ref.central_difference_gradient(lambda x: scalar(flow0, x).item(), logits0.copy())
    err_f = ref.relative_gradient_error(tf.grad[0].numpy(), numeric_f)
    err_l = ref.relative_gradient_error(tl.grad[0].numpy(), numeric_l)
    _require(err_f < 1e-4, f"convex-upsample flow-gradient relative error {err_f}")
    _require(err_l < 1e-4, f"convex-upsample logit-gradient relative error {err_l}")


def check_total_loss_gradients():
    """Analytic loss gradients w.r.t. predictions match central differences."""
    rng = np.random.default_rng(106)
    schedule = schedule_weights(0.8, (2, 3))
    gt = torch.tensor(rng.standard_normal((2, 2, 4, 4)))
    stacked = rng.standard_normal((5, 2, 2, 4, 4))
    for mode in ("pretrain", "finetune"):
        loss_cfg = LossConfig(robust_mode=mode)
        ts = torch.tensor(stacked, requires_grad=True)
        total_loss(list(ts), gt, schedule, loss_cfg).backward()
        numeric = ref.central_difference_gradient(
            lambda x: total_loss([torch.tensor(p) for p in x], gt, schedule, loss_cfg).item(),
            stacked.copy(),
        )
        err = ref.relative_gradient_error(ts.grad.numpy(), numeric)
        _require(err < 1e-4, f"{mode} loss gradient relative error {err} (seed 106)")


def check_flow_file_roundtrips():
    """Bit-exact .flo round trip, byte size, and quantized KITTI round trip."""
    rng = np.random.default_rng(107)
    with tempfile.TemporaryDirectory() as tmp:
        flow = rng.standard_normal((2, 6, 8)).astype(np.float32)
        path = os.path.join(tmp, "x.flo")
        write_flo(path, flow)
        size = os.path.getsize(path)
        _require(size == 396, f"8x6 .flo file is {size} bytes, expected 396")
        back = read_flo(path)
        _require(
            bool((back == flow).all()), "flo round trip is not bit-exact (seed 107, 8x6)"
        )

        kflow = (np.round(rng.uniform(-500, 500, size=(2, 5, 7)) * 64) / 64).astype(np.float32)
        valid = rng.uniform(size=(5, 7)) > 0.3
        kpath = os.path.join(tmp, "x.png")
        write_kitti_png(kpath, kflow, valid)
        kback, vback = read_kitti_png(kpath)
        _require(
            bool((kback == kflow).all()),
            "KITTI round trip not exact at 1/64 px quantization (seed 107)",
        )
        _require(bool((vback == valid).all()), "KITTI valid mask round trip failed")


def check_config_validation():
    """Default config valid; violated invariants raise with the field name."""
    validate_config(ModelConfig(), IterationSchedule(), LossConfig())
    try:
        validate_config(ModelConfig(num_scales=2))
    except ConfigError as exc:
        _require(
            exc.field == "image_channels",
            f"expected image_channels error, got {exc.field}",
        )
    else:
        raise CheckFailure("2 scales with a 3-entry channel list must be rejected")
    cfg = ModelConfig()
    _require(cfg.strides == (16, 8, 4), f"default strides {cfg.strides} != (16, 8, 4)")


def check_trace_structure():
    """Trace length, scale consistency and step determinism on a tiny model."""
    torch.manual_seed(108)
    cfg = ModelConfig(
        num_scales=2, image_channels=(24, 16), context_channels=32,
        hidden_channels=16, lookup_levels=2, lookup_radius=2,
    )
    model = MultiScaleFlowNet(cfg).double().eval()
    img1 = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    img2 = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        trace = model(img1, img2, iters=(2, 3))
        again = model(img1, img2, iters=(2, 3))
    _require(len(trace.predictions) == 5, f"trace has {len(trace.predictions)} != 2+3 predictions")
    _require(
        bool(torch.equal(trace.final, again.final)),
        "two identical runs differ (non-deterministic step)",
    )
    init_fine = trace.scale_inits[1]
    expected = convex_upsample(trace.per_scale_flows[0], trace.scale_masks[0])
    _require(
        bool(torch.equal(init_fine, expected)),
        "finer-scale initialization is not the convex-upsampled coarser flow",
    )


def check_warm_projection():
    """Forward projection of a previous result onto the coarsest grid."""
    zero = torch.zeros(1, 2, 32, 32)
    out = warm_init(zero, (4, 4))
    _require(bool((out == 0).all()), "zero previous flow must project to zero")

    prev = torch.zeros(1, 2, 64, 64)
    prev[:, 0] = 16.0
    out = warm_init(prev, (4, 4))
    _require(bool((out[0, :, :, 0] == 0).all()), "left column must stay unwritten (zero)")
    _require(
        bool((out[0, 0, :, 1:] == 1.0).all()) and bool((out[0, 1] == 0).all()),
        "constant (16, 0) at stride 16 must project to (1, 0) shifted one pixel right",
    )


def check_synthetic_consistency():
    """Generated pairs are deterministic and exactly warp-consistent."""
    spec = SyntheticSpec(pattern="blobs", warp="smooth-random", max_displacement=6.0, seed=109)
    sample = generate(spec, (24, 24))
    again = generate(spec, (24, 24))
    _require(
        bool((sample.image1 == again.image1).all() and (sample.gt_flow == again.gt_flow).all()),
        "same seed must reproduce the identical sample",
    )
    h, w = sample.valid.shape
    worst = 0.0
    for i in range(h):
        for j in range(w):
            if not sample.valid[i, j]:
                continue
            x = j + float(sample.gt_flow[0, i, j])
            y = i + float(sample.gt_flow[1, i, j])
            for c in range(3):
                got = ref.sample_bilinear_zero(sample.image2[c], x, y)
                worst = max(worst, abs(got - float(sample.image1[c, i, j])))
    _require(worst < 1e-6, f"warping frame 2 by the ground truth misses frame 1 by {worst}")


ALL_CHECKS = (
    ("weight_schedule", check_weight_schedule),
    ("loss_values", check_loss_values),
    ("metric_values", check_metric_values),
    ("config_validation", check_config_validation),
    ("cost_volume_oracle", check_cost_volume_oracle),
    ("pyramid_oracle", check_pyramid_oracle),
    ("lookup_oracle", check_lookup_oracle),
    ("lookup_gradient", check_lookup_gradient),
    ("convex_upsample", check_convex_upsample),
    ("total_loss_gradients", check_total_loss_gradients),
    ("flow_file_roundtrips", check_flow_file_roundtrips),
    ("trace_structure", check_trace_structure),
    ("warm_projection", check_warm_projection),
    ("synthetic_consistency", check_synthetic_consistency),
)


def run_checks(names=None) -> list[CheckResult]:
    selected = dict(ALL_CHECKS)
    if names:
        unknown = set(names) - set(selected)
        if unknown:
            raise ValueError(f"unknown checks: {sorted(unknown)}")
        selected = {name: selected[name] for name in names}
    results = []
    for name, fn in selected.items():
        try:
            fn()
        except CheckFailure as exc:
            results.append(CheckResult(name, False, str(exc)))
        except Exception as exc:  # crash counts as failure, with context
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
        else:
            results.append(CheckResult(name, True))
    return results
