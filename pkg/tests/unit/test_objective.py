import math
import warnings

import numpy as np
import pytest
import torch

from scripts.errors import ShapeError
from scripts.mask_gen import AnomalyMask
from scripts.objective import dice_loss, focal_loss, total_loss


def random_maps(seed, shape=(2, 12, 12)):
    generator = torch.Generator().manual_seed(seed)
    S_a = torch.rand(shape, generator=generator, dtype=torch.float64) * 0.8 + 0.1
    mask = torch.rand(shape, generator=generator, dtype=torch.float64) < 0.3
    return 1.0 - S_a, S_a, mask


def test_focal_perfect_prediction_is_zero():
    """
    Test that p_t = 1 everywhere gives zero focal loss.
    """
    Y = torch.zeros(8, 8)
    Y[2:5, 2:5] = 1
    assert focal_loss(1 - Y, Y, Y).item() == 0.0


def test_focal_single_pixel_value():
    """
    Test p_t = 0.5, γ=2, α=1 on one pixel gives -0.25·ln(0.5) ≈ 0.17329.
    """
    half = torch.tensor([[0.5]], dtype=torch.float64)
    loss = focal_loss(half, half, np.ones((1, 1)))
    assert loss.item() == pytest.approx(-0.25 * math.log(0.5), abs=1e-12)
    assert loss.item() == pytest.approx(0.17329, abs=1e-5)


def test_focal_gamma_zero_is_cross_entropy():
    """
    Test that γ=0, α=1 reduces to mean binary cross-entropy.
    """
    S_n, S_a, mask = random_maps(0)
    target = mask.to(torch.float64)
    cross_entropy = -(target * torch.log(S_a) + (1 - target) * torch.log(S_n)).mean()
    loss = focal_loss(S_n, S_a, mask, gamma=0.0, alpha=1.0)
    assert abs(loss.item() - cross_entropy.item()) < 1e-9


def test_focal_accepts_anomaly_mask_and_rejects_shape_mismatch():
    """
    Test that an AnomalyMask target works and a mismatched mask raises a shape error.
    """
    values = np.zeros((6, 6), dtype=np.uint8)
    values[1:3, 1:3] = 1
    S_a = torch.full((6, 6), 0.3, dtype=torch.float64)
    from_mask = focal_loss(1 - S_a, S_a, AnomalyMask.from_array(values))
    from_array = focal_loss(1 - S_a, S_a, values)
    assert from_mask.item() == from_array.item()
    with pytest.raises(ShapeError):
        focal_loss(1 - S_a, S_a, np.zeros((5, 5)))


def test_dice_values():
    """
    Test perfect overlap → 0, S_a ≡ 0 with |Y| = 10 → 1 - 1/11, and empty Y with S_a ≡ 0 → 0.
    """
    Y = torch.zeros(20, 20, dtype=torch.float64)
    Y[5:15, 5:15] = 1
    assert dice_loss(Y, Y).item() == pytest.approx(0.0, abs=1e-12)

    ten = torch.zeros(20, 20, dtype=torch.float64)
    ten[0, :10] = 1
    zeros = torch.zeros(20, 20, dtype=torch.float64)
    assert dice_loss(zeros, ten).item() == pytest.approx(1 - 1 / 11, abs=1e-12)
    assert dice_loss(zeros, torch.zeros(20, 20)).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_batch_is_mean_of_maps():
    """
    Test that a batch's dice loss is the mean of the per-map losses.
    """
    _, S_a, mask = random_maps(1, shape=(3, 10, 10))
    per_map = [dice_loss(S_a[i], mask[i]).item() for i in range(3)]
    assert dice_loss(S_a, mask).item() == pytest.approx(np.mean(per_map), abs=1e-12)


def test_total_perfect_prediction_and_nonnegativity():
    """
    Test total 0 on a perfect prediction, and total ≥ each component on random maps.
    """
    Y = torch.zeros(16, 16, dtype=torch.float64)
    Y[4:9, 3:10] = 1
    assert total_loss(1 - Y, Y, Y).total.item() == pytest.approx(0.0, abs=1e-6)

    for seed in range(5):
        S_n, S_a, mask = random_maps(seed)
        breakdown = total_loss(S_n, S_a, mask)
        assert breakdown.focal.item() >= 0 and breakdown.dice.item() >= 0
        assert breakdown.total.item() >= max(breakdown.focal.item(), breakdown.dice.item())
        floats = breakdown.as_floats()
        assert floats["total"] == pytest.approx(floats["focal"] + floats["dice"])


def test_as_floats_on_graph_tensors_is_silent():
    """
    Test that converting a loss that still requires grad emits no warning and gives plain floats.
    """
    S_n, S_a, mask = random_maps(0)
    S_a = S_a.clone().requires_grad_(True)
    breakdown = total_loss(S_n, S_a, mask)
    assert breakdown.total.requires_grad
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        floats = breakdown.as_floats()
    assert all(type(value) is float for value in floats.values())
    assert floats["total"] == pytest.approx(breakdown.total.item())


def test_total_gradient_matches_finite_differences():
    """
    Test d(total)/d(S_a pixel) against central differences within 1e-4.
    """
    S_n, S_a, mask = random_maps(2)
    S_a = S_a.clone().requires_grad_(True)
    total_loss(S_n, S_a, mask).total.backward()

    h = 1e-6
    for index in [(0, 0, 0), (0, 3, 7), (1, 11, 2), (1, 5, 5)]:
        with torch.no_grad():
            plus, minus = S_a.detach().clone(), S_a.detach().clone()
            plus[index] += h
            minus[index] -= h
            numeric = (total_loss(S_n, plus, mask).total - total_loss(S_n, minus, mask).total).item() / (2 * h)
        analytic = S_a.grad[index].item()
        assert abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-12) < 1e-4
