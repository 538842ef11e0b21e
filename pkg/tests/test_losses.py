import math

import numpy as np
import pytest
import torch

from pointsynth.codec import encode_hv
from pointsynth.geometry import PointLabel
from pointsynth.losses import (adversarial_losses, binary_cross_entropy, image_cycle_loss, instance_loss,
                               point_consistency_loss)


def test_lsgan_optimum():
    d, g = adversarial_losses(torch.ones(2, 1, 4, 4), torch.zeros(2, 1, 4, 4))
    assert d.item() == 0.0


def test_lsgan_generator_optimum():
    _, g = adversarial_losses(None, torch.ones(1, 1, 3, 3), side="mask")
    assert g.item() == 0.0


def test_lsgan_half():
    half = torch.full((1, 1, 5, 5), 0.5)
    d, g = adversarial_losses(half, half)
    assert d.item() == pytest.approx(0.25)
    assert g.item() == pytest.approx(0.125)


def test_lsgan_shape_and_side():
    with pytest.raises(ValueError):
        adversarial_losses(torch.ones(1, 1, 2, 2), torch.ones(1, 1, 3, 3))
    with pytest.raises(ValueError):
        adversarial_losses(torch.ones(1), torch.ones(1), side="other")


def _target():
    m = np.zeros((16, 16), int)
    m[2:8, 3:9] = 1
    m[9:14, 8:15] = 2
    return torch.from_numpy(encode_hv(m))[None].double()


def test_instance_loss_perfect():
    t = _target()
    l_hv, l_seg = instance_loss(t[:, 1:], t[:, :1], t)
    assert l_hv.item() == 0.0
    assert 0 <= l_seg.item() <= 1e-3


def test_instance_loss_constant_offset():
    t = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
    t[:, 0] = 1
    t[:, 1] = torch.linspace(-1, 1, 16)[None, :]
    t[:, 2] = torch.linspace(-1, 1, 16)[:, None]
    pred = t[:, 1:] + 0.1
    l_hv, _ = instance_loss(pred, t[:, :1], t)
    assert l_hv.item() == pytest.approx(0.01, abs=1e-12)


def test_bce_half():
    target = torch.zeros(1, 1, 4, 4)
    target[..., :2] = 1
    assert binary_cross_entropy(torch.full_like(target, 0.5), target).item() == pytest.approx(math.log(2))


def test_point_loss_cases():
    p = PointLabel([(3, 3)], (8, 8))
    ones = torch.ones(1, 1, 8, 8)
    assert point_consistency_loss(ones, ones, p, 2).item() == 0.0
    fake = torch.ones(1, 1, 8, 8)
    fake[0, 0, 3, 3] = math.exp(-1)
    assert point_consistency_loss(fake, ones, p, 0).item() == pytest.approx(1.0)


def test_point_loss_no_points():
    with pytest.warns(RuntimeWarning):
        v = point_consistency_loss(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8), PointLabel([], (8, 8)))
    assert v.item() == 0.0


def test_point_loss_ignores_non_point_pixels():
    p = PointLabel([(1, 1)], (8, 8))
    a = torch.full((1, 1, 8, 8), 0.3)
    b = a.clone()
    b[0, 0, 6, 6] = 0.9
    assert point_consistency_loss(a, a, p, 1).item() == point_consistency_loss(b, b, p, 1).item()


def test_cycle_loss():
    x = torch.rand(2, 3, 5, 5, dtype=torch.float64)
    assert image_cycle_loss(x, x).item() == 0.0
    assert image_cycle_loss(x + 0.2, x).item() == pytest.approx(0.2)
    y = torch.rand(2, 3, 5, 5, dtype=torch.float64)
    brute = sum(abs(a - b) for a, b in zip(x.flatten().tolist(), y.flatten().tolist())) / x.numel()
    assert image_cycle_loss(x, y).item() == pytest.approx(brute, rel=1e-12)


def test_losses_nonnegative():
    rng = torch.Generator().manual_seed(0)
    t = _target()
    for _ in range(10):
        hv = torch.rand(1, 2, 16, 16, generator=rng, dtype=torch.float64) * 2 - 1
        seg = torch.rand(1, 1, 16, 16, generator=rng, dtype=torch.float64)
        l_hv, l_seg = instance_loss(hv, seg, t)
        assert l_hv.item() >= 0 and l_seg.item() >= 0
