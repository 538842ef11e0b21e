"""Segmentation scores and generative fidelity/diversity measures."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .codec import relabel_sequential


# ---------------------------------------------------------------------------
# segmentation

def pixel_metrics(pred_binary, gt_binary) -> tuple[float, float]:
    pred = np.asarray(pred_binary).astype(bool)
    gt = np.asarray(gt_binary).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    inter = np.count_nonzero(pred & gt)
    union = np.count_nonzero(pred | gt)
    total = np.count_nonzero(pred) + np.count_nonzero(gt)
    if union == 0:
        return 1.0, 1.0
    return inter / union, 2.0 * inter / total


def _overlaps(pred, gt):
    """Canonical relabeling plus intersection table and object areas.

    Both masks are relabeled by first appearance in raster order so that
    greedy matching and tie-breaking do not depend on the ids a caller chose.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = relabel_sequential(pred).ravel().astype(np.int64)
    g = relabel_sequential(gt).ravel().astype(np.int64)
    n_p, n_g = int(p.max(initial=0)), int(g.max(initial=0))
    inter = np.bincount(g * (n_p + 1) + p, minlength=(n_g + 1) * (n_p + 1))
    inter = inter.reshape(n_g + 1, n_p + 1)
    area_g = np.bincount(g, minlength=n_g + 1)
    area_p = np.bincount(p, minlength=n_p + 1)
    return inter[1:, 1:], area_g[1:], area_p[1:]


def aji(pred, gt) -> float:
    """Aggregated Jaccard index with one-to-one greedy matching.

    Ground-truth objects are visited in canonical order; each takes the still
    unused prediction of highest IoU. Unmatched ground truth and unused
    predictions both add their area to the union.
    """
    inter, area_g, area_p = _overlaps(pred, gt)
    if len(area_g) == 0:
        return 1.0 if len(area_p) == 0 else 0.0
    union = area_g[:, None] + area_p[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    used = np.zeros(len(area_p), dtype=bool)
    c = u = 0
    for i in range(len(area_g)):
        cand = np.where(used, -1.0, iou[i]) if len(area_p) else np.empty(0)
        if len(cand) and cand.max() > 0:
            j = int(np.argmax(cand))
            used[j] = True
            c += inter[i, j]
            u += union[i, j]
        else:
            u += area_g[i]
    u += area_p[~used].sum()
    return float(c / u)


def _directed_dice(inter, area_a, area_b):
    total = 0.0
    for i in range(len(area_a)):
        j = int(np.argmax(inter[i]))
        if inter[i, j] > 0:
            total += area_a[i] * 2.0 * inter[i, j] / (area_a[i] + area_b[j])
    return total / area_a.sum()


def object_dice(pred, gt) -> float:
    """Area-weighted object Dice averaged over both matching directions."""
    inter, area_g, area_p = _overlaps(pred, gt)
    if len(area_g) == 0 and len(area_p) == 0:
        return 1.0
    if len(area_g) == 0 or len(area_p) == 0:
        return 0.0
    return 0.5 * (_directed_dice(inter, area_g, area_p) + _directed_dice(inter.T, area_p, area_g))


@dataclass
class SegScores:
    names: list
    iou: np.ndarray
    f1: np.ndarray
    obj_dice: np.ndarray
    aji: np.ndarray

    FIELDS = ("iou", "f1", "obj_dice", "aji")

    def summary(self) -> dict:
        return {k: (float(np.mean(getattr(self, k))), float(np.std(getattr(self, k))))
                for k in self.FIELDS}

    def rows(self):
        """(metric, item, value, mean, std) report rows."""
        out = []
        for k in self.FIELDS:
            vals = getattr(self, k)
            mean, std = float(np.mean(vals)), float(np.std(vals))
            for name, v in zip(self.names, vals):
                out.append((k, name, float(v), "", ""))
            out.append((k, "aggregate", "", mean, std))
        return out


def score_segmentation(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], names=None) -> SegScores:
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    names = list(names) if names is not None else [str(i) for i in range(len(preds))]
    cols = {k: [] for k in SegScores.FIELDS}
    for p, g in zip(preds, gts):
        iou, f1 = pixel_metrics(p > 0, g > 0)
        cols["iou"].append(iou)
        cols["f1"].append(f1)
        cols["obj_dice"].append(object_dice(p, g))
        cols["aji"].append(aji(p, g))
    return SegScores(names, **{k: np.array(v, dtype=np.float64) for k, v in cols.items()})


# ---------------------------------------------------------------------------
# synthesis

@dataclass
class FeatureSet:
    features: np.ndarray
    extractor: str

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if not np.isfinite(self.features).all():
            raise ValueError("non-finite features")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


def _as_nchw(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images])
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 127.5 - 1.0
    if arr.ndim == 3:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=np.float64))


class ToyEmbedding(nn.Module):
    """Frozen random conv net, a weights-free stand-in for the inception pool."""

    def __init__(self, seed=0, dim=64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, 16, 32, dim]
        self.convs = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / np.sqrt(cin * 9))
                conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen))
            self.convs.append(conv)
        self.double().eval().requires_grad_(False)

    def forward(self, x):
        for conv in self.convs:
            x = torch.relu(conv(x))
        return x.mean(dim=(2, 3))


def _inception_model():
    try:
        from torchvision.models import Inception_V3_Weights, inception_v3
        model = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1)
    except Exception as exc:  # weights download or torchvision missing
        raise RuntimeError(
            "inception extractor needs torchvision with downloadable ImageNet weights; "
            "use extractor='toy' offline") from exc
    model.fc = nn.Identity()
    return model.eval().requires_grad_(False)


def embed_features(images, extractor: str = "toy", batch_size: int = 16, seed: int = 0) -> FeatureSet:
    """Embed a list of H x W x 3 images (uint8, or float in [-1, 1])."""
    if len(images) == 0:
        raise ValueError("need at least one image")
    if extractor == "toy":
        model = ToyEmbedding(seed=seed)
    elif extractor == "inception":
        model = _inception_model()
    else:
        raise ValueError(f"unknown extractor {extractor!r}")
    feats = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _as_nchw(images[start:start + batch_size])
            if extractor == "inception":
                x = torch.nn.functional.interpolate(x.float(), size=(299, 299), mode="bilinear",
                                                    align_corners=False)
                mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
                std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
                x = ((x + 1) / 2 - mean) / std
            feats.append(model(x).double().numpy())
    return FeatureSet(np.concatenate(feats), extractor)


def _check_pair(a: FeatureSet, b: FeatureSet):
    if a.dim != b.dim:
        raise ValueError(f"feature dimension mismatch {a.dim} vs {b.dim}")
    if a.n < 2 or b.n < 2:
        raise ValueError("need at least 2 samples per set")


def _sqrt_trace(sigma_a, sigma_b) -> float:
    # tr((A B)^1/2) == tr((A^1/2 B A^1/2)^1/2) for PSD A, B
    w, v = np.linalg.eigh(sigma_a)
    half = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    m = half @ sigma_b @ half
    m = 0.5 * (m + m.T)
    ev = np.linalg.eigvalsh(m)
    return float(np.sqrt(np.clip(ev, 0, None)).sum())


def fid(a: FeatureSet, b: FeatureSet, eps: float = 1e-6) -> float:
    _check_pair(a, b)
    mu_a, mu_b = a.features.mean(0), b.features.mean(0)
    cov_a = np.atleast_2d(np.cov(a.features, rowvar=False, ddof=1))
    cov_b = np.atleast_2d(np.cov(b.features, rowvar=False, ddof=1))
    try:
        tr = _sqrt_trace(cov_a, cov_b)
        if not np.isfinite(tr):
            raise np.linalg.LinAlgError("non-finite trace")
    except np.linalg.LinAlgError:
        jitter = eps * np.eye(a.dim)
        tr = _sqrt_trace(cov_a + jitter, cov_b + jitter)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr)


def polynomial_kernel(x, y):
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x, y) -> float:
    """U-statistic MMD^2 for equally sized samples; every diagonal is excluded."""
    m = x.shape[0]
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    off = lambda k: k.sum() - np.trace(k)
    return float((off(kxx) + off(kyy) - 2.0 * off(kxy)) / (m * (m - 1)))


def kid(a: FeatureSet, b: FeatureSet, block_size: int = 1024) -> tuple[float, float]:
    """Mean and standard deviation of block-wise unbiased MMD^2."""
    _check_pair(a, b)
    m = min(a.n, b.n, block_size)
    n_blocks = min(a.n // m, b.n // m)
    vals = [mmd2_unbiased(a.features[i * m:(i + 1) * m], b.features[i * m:(i + 1) * m])
            for i in range(n_blocks)]
    return float(np.mean(vals)), float(np.std(vals))


def sample_diversity(samples) -> float:
    """Mean over pixels and channels of the population std across samples."""
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    return float(stack.std(axis=0).mean())
