"""Scheduled reconstruction loss, baselines, and the combined objective.

Frozen constants: 0.5^0.8 and 0.5^3.1 from high-precision power evaluation,
ln 2 for the BCE term, and the 1e-6 error floor raised to 0.8.
"""

import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from clip_rpn import losses, perception

HALF_POW_08 = 0.5743491774985174
HALF_POW_31 = 0.11662912394210093
FLOOR_POW_08 = 1.5848931924611134e-05  # (1e-6)^0.8 = 10^-4.8
LN2 = 0.6931471805599453
THREE_HALF_MASKS = 0.2079441541679836  # 0.1 * 3 * ln 2


# ---------------------------------------------------------------------------
# exponent schedule


def test_schedule_endpoints_exact():
    schedule = losses.LossSchedule(beta=0.8, eta=2.3, total_steps=1000)
    assert abs(schedule.exponent(0) - 0.8) <= 1e-12
    assert abs(schedule.exponent(1000) - 3.1) <= 1e-12


def test_schedule_midpoint_linear():
    schedule = losses.LossSchedule(beta=0.8, eta=2.3, total_steps=200)
    assert_allclose(schedule.exponent(100), 0.8 + 2.3 * 0.5, atol=1e-12)


def test_schedule_non_decreasing():
    schedule = losses.LossSchedule(total_steps=500)
    values = [schedule.exponent(s) for s in range(0, 501, 25)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        losses.LossSchedule(beta=0.0)
    with pytest.raises(ValueError):
        losses.LossSchedule(eta=-0.1)
    with pytest.raises(ValueError):
        losses.LossSchedule(total_steps=0)
    schedule = losses.LossSchedule(total_steps=10)
    with pytest.raises(ValueError):
        schedule.exponent(-1)
    with pytest.raises(ValueError):
        schedule.exponent(11)


def test_ramp_factories_share_endpoints():
    T = 120
    for factory in (losses.linear_ramp, losses.cosine_ramp, losses.step_ramp):
        ramp = factory(T)
        assert abs(ramp(0)) <= 1e-12
        assert abs(ramp(T) - T) <= 1e-9


def test_cosine_ramp_slow_start():
    T = 100
    ramp = losses.cosine_ramp(T)
    assert ramp(10) < 10  # lags the linear ramp early
    assert ramp(90) > 90  # leads it late


def test_step_ramp_piecewise_constant():
    ramp = losses.step_ramp(100, stages=4)
    assert ramp(10) == ramp(20)
    assert ramp(30) == ramp(49)
    assert ramp(20) < ramp(30)


def test_schedule_with_custom_ramp():
    T = 100
    schedule = losses.LossSchedule(total_steps=T, schedule_fn=losses.cosine_ramp(T))
    assert abs(schedule.exponent(0) - 0.8) <= 1e-12
    assert abs(schedule.exponent(T) - 3.1) <= 1e-9


# ---------------------------------------------------------------------------
# scheduled loss values


def _const_pair(value, shape=(2, 3, 4, 4)):
    pred = torch.full(shape, value, dtype=torch.float64)
    target = torch.zeros(shape, dtype=torch.float64)
    return pred, target


def test_dls_unit_error_is_one_at_any_step():
    pred, target = _const_pair(1.0)
    schedule = losses.LossSchedule(total_steps=100)
    for step in (0, 50, 100):
        assert_allclose(losses.dls_loss(pred, target, schedule, step).item(), 1.0, atol=1e-12)


def test_dls_half_error_frozen_endpoints():
    pred, target = _const_pair(0.5)
    schedule = losses.LossSchedule(total_steps=100)
    assert abs(losses.dls_loss(pred, target, schedule, 0).item() - HALF_POW_08) <= 1e-9
    assert abs(losses.dls_loss(pred, target, schedule, 100).item() - HALF_POW_31) <= 1e-9


def test_dls_perfect_prediction_sits_on_floor():
    pred, target = _const_pair(0.0)
    schedule = losses.LossSchedule(total_steps=10)
    loss = losses.dls_loss(pred, target, schedule, 0).item()
    assert abs(loss - FLOOR_POW_08) <= 1e-12
    assert loss < 2e-5


def test_dls_monotone_in_step_for_subunit_error():
    pred, target = _const_pair(0.3)
    schedule = losses.LossSchedule(total_steps=100)
    values = [losses.dls_loss(pred, target, schedule, s).item() for s in range(0, 101, 10)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_dls_shape_mismatch():
    schedule = losses.LossSchedule(total_steps=10)
    with pytest.raises(ValueError):
        losses.dls_loss(torch.zeros(2, 3), torch.zeros(3, 2), schedule, 0)


def test_dls_autograd_matches_profile():
    # d/d(pred) of mean(|pred - target|^p) is p*eps^(p-1)*sign/N elementwise
    schedule = losses.LossSchedule(total_steps=100)
    eps_values = np.array([0.05, 0.2, 0.9])
    for step in (0, 50, 100):
        pred = torch.tensor(eps_values, dtype=torch.float64, requires_grad=True)
        target = torch.zeros(3, dtype=torch.float64)
        losses.dls_loss(pred, target, schedule, step).backward()
        profile = losses.dls_gradient_profile(schedule, step, eps_values)
        assert_allclose(pred.grad.numpy(), profile / eps_values.size, rtol=1e-10)


# ---------------------------------------------------------------------------
# gradient profile


def test_profile_matches_central_differences():
    schedule = losses.LossSchedule(total_steps=100)
    grid = np.linspace(0.01, 1.0, 25)
    h = 1e-6
    for step in (0, 37, 100):
        p = schedule.exponent(step)
        numeric = ((grid + h) ** p - (grid - h) ** p) / (2 * h)
        analytic = losses.dls_gradient_profile(schedule, step, grid)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-12)
        assert rel.max() <= 1e-4


def test_profile_regimes():
    grid = np.linspace(0.01, 1.0, 50)
    decreasing = losses.dls_gradient_profile(losses.LossSchedule(total_steps=10), 0, grid)
    assert (np.diff(decreasing) < 0).all()  # p = 0.8

    l1_like = losses.LossSchedule(beta=1.0, eta=0.0, total_steps=10)
    assert_allclose(losses.dls_gradient_profile(l1_like, 5, grid), 1.0, atol=1e-12)

    l2_like = losses.LossSchedule(beta=2.0, eta=0.0, total_steps=10)
    assert_allclose(losses.dls_gradient_profile(l2_like, 5, grid), 2.0 * grid, atol=1e-12)


def test_profile_grid_validation():
    schedule = losses.LossSchedule(total_steps=10)
    with pytest.raises(ValueError):
        losses.dls_gradient_profile(schedule, 0, np.array([]))
    with pytest.raises(ValueError):
        losses.dls_gradient_profile(schedule, 0, np.array([0.0, 0.5]))
    with pytest.raises(ValueError):
        losses.dls_gradient_profile(schedule, 0, np.array([0.5, 1.1]))


# ---------------------------------------------------------------------------
# baselines


def test_baseline_values_for_uniform_half_error():
    pred, target = _const_pair(0.5)
    assert_allclose(losses.baseline_loss(pred, target, "l1").item(), 0.5, atol=1e-12)
    assert_allclose(losses.baseline_loss(pred, target, "l2").item(), 0.25, atol=1e-12)
    assert_allclose(losses.baseline_loss(pred, target, "huber").item(), 0.125, atol=1e-12)


def test_baseline_zero_at_perfect_prediction():
    pred, target = _const_pair(0.0)
    for kind in losses.BASELINE_KINDS:
        assert losses.baseline_loss(pred, target, kind).item() == 0.0


def test_huber_transitions_at_delta():
    # below delta: quadratic (0.5 * e^2); above: linear (delta * (e - delta/2))
    target = torch.zeros(2, dtype=torch.float64)
    small = torch.tensor([0.4, 0.4], dtype=torch.float64)
    large = torch.tensor([3.0, 3.0], dtype=torch.float64)
    assert_allclose(losses.baseline_loss(small, target, "huber").item(), 0.5 * 0.16, atol=1e-12)
    assert_allclose(losses.baseline_loss(large, target, "huber").item(), 3.0 - 0.5, atol=1e-12)


def test_baseline_unknown_kind():
    pred, target = _const_pair(0.1)
    with pytest.raises(ValueError):
        losses.baseline_loss(pred, target, "l3")


# ---------------------------------------------------------------------------
# total objective


def _mask_fixture(value, dtype=torch.float64):
    preds = [torch.full((1, 1, 8 // f, 8 // f), value, dtype=dtype) for f in (1, 2, 4)]
    gts = [torch.zeros_like(p) for p in preds]
    return preds, gts


def test_total_loss_breakdown_identity():
    torch.manual_seed(0)
    pred = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    target = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    preds, gts = _mask_fixture(0.3)
    schedule = losses.LossSchedule(total_steps=100)
    out = losses.total_loss(pred, target, preds, gts, schedule, 42)
    recon = out.reconstruction.item()
    bce_sum = sum(b.item() for b in out.mask_bce)
    assert abs(out.total.item() - (recon + 0.1 * bce_sum)) <= 1e-9


def test_total_loss_half_masks_oracle():
    # perfect reconstruction, all-0.5 masks on all-zero gt: the BCE part is
    # exactly 0.1 * 3 * ln2 and the reconstruction sits on the error floor
    pred, target = _const_pair(0.0, (1, 3, 8, 8))
    preds, gts = _mask_fixture(0.5)
    schedule = losses.LossSchedule(total_steps=100)
    out = losses.total_loss(pred, target, preds, gts, schedule, 0)
    assert abs(out.total.item() - THREE_HALF_MASKS - FLOOR_POW_08) <= 1e-9
    for bce in out.mask_bce:
        assert abs(bce.item() - LN2) <= 1e-9


def test_total_loss_without_masks():
    pred, target = _const_pair(0.5, (1, 3, 4, 4))
    schedule = losses.LossSchedule(total_steps=10)
    out = losses.total_loss(pred, target, [], [], schedule, 0)
    assert out.total.item() == out.reconstruction.item()
    assert len(out.mask_bce) == 3
    for bce in out.mask_bce:
        assert bce.item() == 0.0


def test_total_loss_exponent_reporting():
    pred, target = _const_pair(0.5, (1, 3, 4, 4))
    schedule = losses.LossSchedule(total_steps=100)
    assert losses.total_loss(pred, target, [], [], schedule, 0).current_exponent == pytest.approx(0.8)
    assert losses.total_loss(pred, target, [], [], schedule, 0, "l1").current_exponent == 1.0
    assert losses.total_loss(pred, target, [], [], schedule, 0, "l2").current_exponent == 2.0
    assert math.isnan(losses.total_loss(pred, target, [], [], schedule, 0, "huber").current_exponent)


def test_total_loss_count_mismatch():
    pred, target = _const_pair(0.5, (1, 3, 4, 4))
    schedule = losses.LossSchedule(total_steps=10)
    with pytest.raises(ValueError):
        losses.total_loss(pred, target, [torch.zeros(1, 1, 4, 4)], [], schedule, 0)


def test_total_loss_backward_flows_to_masks():
    pred, target = _const_pair(0.2, (1, 3, 8, 8))
    mask_preds = [
        torch.full((1, 1, 8 // f, 8 // f), 0.4, dtype=torch.float64, requires_grad=True)
        for f in (1, 2, 4)
    ]
    gts = [torch.zeros(1, 1, 8 // f, 8 // f, dtype=torch.float64) for f in (1, 2, 4)]
    schedule = losses.LossSchedule(total_steps=10)
    out = losses.total_loss(pred, target, mask_preds, gts, schedule, 5)
    out.total.backward()
    for mp in mask_preds:
        assert mp.grad is not None
        assert mp.grad.abs().sum() > 0
