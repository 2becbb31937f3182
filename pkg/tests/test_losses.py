import math

import numpy as np
import pytest
import torch

from msflow import reference as ref
from msflow.config import LossConfig
from msflow.losses import (
    epe,
    fl_rate,
    format_metrics,
    per_iteration_loss,
    schedule_weights,
    total_loss,
)


class TestScheduleWeights:
    """Exponential weighting over the scale-major iteration order."""

    def test_covers_exactly_all_pairs(self):
        schedule = schedule_weights(0.8, (4, 6, 8))
        assert schedule.total_iterations == 18
        assert set(schedule.weights) == {
            (s, i) for s, n in enumerate((4, 6, 8), start=1) for i in range(1, n + 1)
        }

    def test_worked_values(self):
        schedule = schedule_weights(0.8, (4, 6, 8))
        assert schedule.weights[(3, 8)] == 1.0
        # Global iteration index of (2, 3) is 4 + 3 = 7, so weight = 0.8**11.
        assert schedule.weights[(2, 3)] == pytest.approx(0.8**11, abs=1e-15)
        assert schedule.weights[(1, 1)] == pytest.approx(0.8**17, abs=1e-15)

    def test_ratio_law_holds_across_scale_boundaries(self):
        schedule = schedule_weights(0.8, (4, 6, 8))
        ordered = schedule.ordered_weights()
        for a, b in zip(ordered, ordered[1:]):
            assert b / a == pytest.approx(1.25, abs=1e-12)

    def test_weights_strictly_increasing_for_gamma_below_one(self):
        ordered = schedule_weights(0.9, (2, 2, 3)).ordered_weights()
        assert all(b > a for a, b in zip(ordered, ordered[1:]))

    def test_gamma_one_gives_uniform_weights(self):
        assert set(schedule_weights(1.0, (3, 2)).ordered_weights()) == {1.0}

    @pytest.mark.parametrize("gamma", [0.0, -0.2, 1.01])
    def test_invalid_gamma(self, gamma):
        with pytest.raises(ValueError):
            schedule_weights(gamma, (4, 6, 8))


class TestPerIterationLoss:
    def test_exact_prediction_hits_the_eps_floor(self):
        gt = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
        value = per_iteration_loss(gt, gt, eps=1e-5).item()
        assert value == pytest.approx(math.sqrt(1e-5), abs=1e-12)

    def test_two_pixel_worked_example(self):
        pred = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        pred[0, :, 0, 0] = torch.tensor([3.0, 4.0])
        gt = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        value = per_iteration_loss(pred, gt).item()
        expected = (math.sqrt(25 + 1e-5) + math.sqrt(1e-5)) / 2
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(2.50158, abs=1e-5)

    def test_valid_mask_restricts_the_mean(self):
        pred = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        pred[0, :, 0, 0] = torch.tensor([3.0, 4.0])
        gt = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        mask = torch.tensor([[[False, True]]])
        value = per_iteration_loss(pred, gt, valid_mask=mask).item()
        assert value == pytest.approx(math.sqrt(1e-5), abs=1e-12)

    def test_empty_mask_is_an_error(self):
        gt = torch.zeros(1, 2, 2, 2)
        with pytest.raises(ValueError):
            per_iteration_loss(gt, gt, valid_mask=torch.zeros(1, 2, 2, dtype=torch.bool))

    def test_batch_mean_is_mean_of_per_sample_means(self):
        rng = np.random.default_rng(3)
        pred = torch.tensor(rng.standard_normal((3, 2, 4, 4)))
        gt = torch.tensor(rng.standard_normal((3, 2, 4, 4)))
        whole = per_iteration_loss(pred, gt).item()
        singles = [per_iteration_loss(pred[i], gt[i]).item() for i in range(3)]
        assert whole == pytest.approx(sum(singles) / 3, abs=1e-12)


class TestTotalLoss:
    def test_single_scale_single_iteration_pretrain(self):
        schedule = schedule_weights(0.8, (1,))
        gt = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
        value = total_loss([gt], gt, schedule, LossConfig()).item()
        assert value == pytest.approx(math.sqrt(1e-5), abs=1e-12)

    def test_single_scale_single_iteration_finetune(self):
        schedule = schedule_weights(0.8, (1,))
        gt = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
        value = total_loss([gt], gt, schedule, LossConfig(robust_mode="finetune")).item()
        assert value == pytest.approx((math.sqrt(1e-5) + 0.01) ** 0.7, abs=1e-12)

    def test_robust_mode_downweights_outlier_samples(self):
        # Two samples whose inner means are 0.1 and 10: the robust transform
        # maps them to (0.11)**0.7 and (10.01)**0.7 before averaging, so the
        # large-error sample contributes far less than its linear share.
        schedule = schedule_weights(0.8, (1,))
        h = w = 4
        gt = torch.zeros(2, 2, h, w, dtype=torch.float64)
        pred = torch.zeros_like(gt)
        m1 = math.sqrt(0.1**2 - 1e-5)
        m2 = math.sqrt(10.0**2 - 1e-5)
        pred[0, 0] = m1
        pred[1, 0] = m2
        value = total_loss([pred], gt, schedule, LossConfig(robust_mode="finetune")).item()
        expected = ((0.1 + 0.01) ** 0.7 + (10.0 + 0.01) ** 0.7) / 2
        assert value == pytest.approx(expected, abs=1e-9)
        assert value == pytest.approx(2.614336137, abs=1e-6)
        linear = total_loss([pred], gt, schedule, LossConfig()).item()
        assert value < linear  # the outlier-heavy batch is damped

    def test_weighted_sum_matches_manual_composition(self):
        rng = np.random.default_rng(4)
        schedule = schedule_weights(0.8, (2, 3))
        preds = [torch.tensor(rng.standard_normal((2, 2, 3, 3))) for _ in range(5)]
        gt = torch.tensor(rng.standard_normal((2, 2, 3, 3)))
        value = total_loss(preds, gt, schedule, LossConfig()).item()
        manual = sum(
            w * per_iteration_loss(p, gt).item()
            for w, p in zip(schedule.ordered_weights(), preds)
        )
        assert value == pytest.approx(manual, abs=1e-12)

    def test_trace_length_mismatch_rejected(self):
        schedule = schedule_weights(0.8, (2, 3))
        gt = torch.zeros(1, 2, 2, 2)
        with pytest.raises(ValueError):
            total_loss([gt] * 4, gt, schedule, LossConfig())

    def test_finetune_equals_pretrain_at_q1_eps0(self):
        rng = np.random.default_rng(5)
        schedule = schedule_weights(0.8, (2,))
        preds = [torch.tensor(rng.standard_normal((2, 2, 4, 4))) for _ in range(2)]
        gt = torch.tensor(rng.standard_normal((2, 2, 4, 4)))
        a = total_loss(preds, gt, schedule, LossConfig()).item()
        b = total_loss(
            preds, gt, schedule, LossConfig(robust_mode="finetune", q=1.0, epsilon_prime=0.0)
        ).item()
        assert a == pytest.approx(b, abs=1e-14)

    def test_robust_loss_monotone_and_concave_in_sample_mean(self):
        # Evaluate the robust loss as a function of one sample's inner mean:
        # strictly increasing, with strictly decreasing increments (q < 1).
        schedule = schedule_weights(0.8, (1,))
        cfg = LossConfig(robust_mode="finetune")
        means = np.linspace(0.05, 8.0, 12)
        values = []
        for m in means:
            pred = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
            pred[0, 0] = math.sqrt(m**2 - 1e-5)
            gt = torch.zeros_like(pred)
            values.append(total_loss([pred], gt, schedule, cfg).item())
        diffs = np.diff(values)
        assert (diffs > 0).all()
        assert (np.diff(diffs) < 0).all()


class TestGradients:
    """Analytic loss gradients match central finite differences (float64)."""

    @pytest.mark.parametrize("mode", ["pretrain", "finetune"])
    def test_total_loss_gradient(self, mode):
        rng = np.random.default_rng(6)
        schedule = schedule_weights(0.8, (1, 2))
        cfg = LossConfig(robust_mode=mode)
        gt = torch.tensor(rng.standard_normal((2, 2, 4, 4)))
        stacked = rng.standard_normal((3, 2, 2, 4, 4))
        ts = torch.tensor(stacked, requires_grad=True)
        total_loss(list(ts), gt, schedule, cfg).backward()
        numeric = ref.central_difference_gradient(
            lambda x: total_loss([torch.tensor(p) for p in x], gt, schedule, cfg).item(),
            stacked.copy(),
        )
        assert ref.relative_gradient_error(ts.grad.numpy(), numeric) < 1e-4

    def test_per_iteration_loss_gradient(self):
        rng = np.random.default_rng(7)
        pred0 = rng.standard_normal((1, 2, 4, 4))
        gt = torch.tensor(rng.standard_normal((1, 2, 4, 4)))
        t = torch.tensor(pred0, requires_grad=True)
        per_iteration_loss(t, gt).backward()
        numeric = ref.central_difference_gradient(
            lambda x: per_iteration_loss(torch.tensor(x), gt).item(), pred0.copy()
        )
        assert ref.relative_gradient_error(t.grad.numpy(), numeric) < 1e-4


class TestMetrics:
    def test_three_four_five(self):
        pred = torch.tensor([[[3.0]], [[4.0]]])
        gt = torch.zeros(2, 1, 1)
        assert epe(pred, gt) == 5.0
        assert epe(gt, gt) == 0.0

    def test_mean_over_pixels(self):
        pred = torch.zeros(2, 1, 2)
        pred[0, 0, 0] = 5.0
        gt = torch.zeros(2, 1, 2)
        assert epe(pred, gt) == pytest.approx(2.5)

    def test_fl_rule_cases(self):
        gt = torch.zeros(2, 1, 1)
        gt[0] = 100.0
        pred = gt.clone()
        pred[1] = 4.0  # error 4 px, 5% threshold is 5 px
        assert fl_rate(pred, gt) == 0.0
        gt[0] = 10.0
        pred = gt.clone()
        pred[1] = 4.0  # error 4 px > 3 px and > 0.5 px
        assert fl_rate(pred, gt) == 100.0
        assert fl_rate(gt, gt) == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        pred = rng.standard_normal((2, 1, 16))
        gt = rng.standard_normal((2, 1, 16))
        perm = rng.permutation(16)
        assert epe(torch.tensor(pred), torch.tensor(gt)) == pytest.approx(
            epe(torch.tensor(pred[:, :, perm]), torch.tensor(gt[:, :, perm])), abs=1e-12
        )
        assert fl_rate(torch.tensor(pred * 10), torch.tensor(gt)) == pytest.approx(
            fl_rate(torch.tensor(pred[:, :, perm] * 10), torch.tensor(gt[:, :, perm])), abs=1e-12
        )

    def test_empty_mask_is_an_error(self):
        gt = torch.zeros(2, 2, 2)
        with pytest.raises(ValueError):
            epe(gt, gt, valid_mask=torch.zeros(2, 2, dtype=torch.bool))
        with pytest.raises(ValueError):
            fl_rate(gt, gt, valid_mask=torch.zeros(2, 2, dtype=torch.bool))

    def test_metric_line_format(self):
        text = format_metrics({"epe": 1.5, "fl": 2})
        assert text == "epe\t1.5\nfl\t2\n"
