"""Training objectives for the mask/image translation pair and the segmentor."""
from __future__ import annotations

import warnings

import numpy as np
import torch

from .codec import sobel
from .geometry import PointLabel, dilate_points

PROB_EPS = 1e-7
DICE_SMOOTH = 1e-5


def adversarial_losses(scores_real: torch.Tensor, scores_fake: torch.Tensor, side: str = "image"):
    """Least-squares GAN terms, returned as ``(loss_D, loss_G)``.

    The same form serves the image discriminator and the mask discriminator;
    ``side`` only names which one. For the generator term pass scores that
    were computed with the discriminator frozen.
    """
    if side not in ("image", "mask"):
        raise ValueError(f"side must be 'image' or 'mask', got {side!r}")
    if scores_real is not None and scores_real.shape != scores_fake.shape:
        raise ValueError("score maps must have the same shape")
    loss_g = 0.5 * ((scores_fake - 1.0) ** 2).mean()
    if scores_real is None:
        return None, loss_g
    loss_d = 0.5 * ((1.0 - scores_real) ** 2).mean() + 0.5 * (scores_fake ** 2).mean()
    return loss_d, loss_g


def discriminator_loss(scores_real, scores_fake):
    return 0.5 * ((1.0 - scores_real) ** 2).mean() + 0.5 * (scores_fake ** 2).mean()


def generator_adv_loss(scores_fake):
    return 0.5 * ((scores_fake - 1.0) ** 2).mean()


def soft_dice_loss(prob, target, smooth=DICE_SMOOTH):
    inter = (prob * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (prob.sum() + target.sum() + smooth)


def binary_cross_entropy(prob, target, eps=PROB_EPS):
    p = prob.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def hv_loss(pred_hv, target_hv):
    """Squared error on the offset maps plus squared error of their derivatives.

    Horizontal offsets are differentiated along columns and vertical offsets
    along rows.
    """
    mse = ((pred_hv - target_hv) ** 2).mean()
    gh = sobel(pred_hv[:, :1], "x") - sobel(target_hv[:, :1], "x")
    gv = sobel(pred_hv[:, 1:2], "y") - sobel(target_hv[:, 1:2], "y")
    msge = 0.5 * ((gh ** 2).mean() + (gv ** 2).mean())
    return mse + msge


def instance_loss(pred_hv, pred_seg, target):
    """Returns ``(L_hv, L_seg)`` against a (N, 3, H, W) encoding target."""
    if pred_hv.shape[-2:] != target.shape[-2:] or pred_seg.shape[-2:] != target.shape[-2:]:
        raise ValueError("prediction and target shapes differ")
    seg_t = target[:, :1]
    l_hv = hv_loss(pred_hv, target[:, 1:3])
    l_seg = soft_dice_loss(pred_seg, seg_t) + binary_cross_entropy(pred_seg, seg_t)
    return l_hv, l_seg


def _point_mask(points, like: torch.Tensor, radius: float) -> torch.Tensor:
    if isinstance(points, torch.Tensor):
        return points.to(dtype=torch.bool).expand_as(like)
    labels = [points] if isinstance(points, PointLabel) else list(points)
    masks = np.stack([dilate_points(p, radius) for p in labels])[:, None]
    return torch.from_numpy(masks).expand_as(like)


def point_consistency_loss(seg_prob_on_fake, seg_prob_on_real, points, dilation_radius: float = 2.0):
    """Negative log foreground probability at annotated points, on both images.

    ``points`` is a :class:`PointLabel`, one label per batch item, or an
    already dilated boolean mask broadcastable to the probability maps.
    """
    mask = _point_mask(points, seg_prob_on_fake, dilation_radius)
    n = mask.sum()
    if n == 0:
        warnings.warn("no point pixels; point loss is zero", RuntimeWarning, stacklevel=2)
        return seg_prob_on_fake.sum() * 0.0
    nll = -torch.log(seg_prob_on_fake.clamp_min(PROB_EPS)) - torch.log(seg_prob_on_real.clamp_min(PROB_EPS))
    return (nll * mask).sum() / n


def image_cycle_loss(reconstructed, original):
    if reconstructed.shape != original.shape:
        raise ValueError("shape mismatch")
    return (reconstructed - original).abs().mean()
