"""Procedural stained-tissue phantoms for offline demos and smoke tests.

Nuclei are dark purple blobs with chromatin speckle on a pink, slowly varying
stroma. Nothing here is a model of real tissue; it only has to be a
consistent image domain that a small network can learn.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .codec import centroids_from_instances
from .geometry import SamplerConfig, generate_point_labels, sample_instance_mask

STROMA = np.array([0.92, 0.70, 0.82])
NUCLEUS = np.array([0.35, 0.22, 0.52])


def render_phantom(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Render an H x W x 3 float image in [-1, 1] for an instance mask."""
    h, w = mask.shape
    low = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 12)
    low /= np.abs(low).max() + 1e-8
    fibres = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=(1.0, 4.0))
    fibres /= np.abs(fibres).max() + 1e-8
    bg = STROMA[None, None] * (1.0 + 0.08 * low[..., None] + 0.05 * fibres[..., None])

    fg = ndimage.gaussian_filter((mask > 0).astype(np.float64), sigma=0.7)
    speckle = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=0.8)
    shade = np.zeros((h, w))
    n = int(mask.max())
    if n:
        shade_per = rng.uniform(-0.08, 0.08, size=n + 1)
        shade_per[0] = 0
        shade = shade_per[mask]
    nuc = NUCLEUS[None, None] * (1.0 + shade[..., None] + 0.15 * speckle[..., None])

    img = bg * (1 - fg[..., None]) + nuc * fg[..., None]
    img += 0.02 * rng.standard_normal(img.shape)
    return np.clip(img * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)



def make_phantom_set(n_images: int, size: int = 128, seed: int = 0, count_range=None,
                     min_spacing: float = 14.0, sampler: SamplerConfig | None = None):
    """Return ``[(image, mask, points), ...]`` with images in [-1, 1].

    The default nucleus count is 12..20 per 128 x 128 pixels.
    """
    if count_range is None:
        scale = (size / 128) ** 2
        count_range = (max(1, round(12 * scale)), max(1, round(20 * scale)))
    sampler = sampler or SamplerConfig(area_min=30.0, area_max=150.0, overlap_kappa=0.45)
    labels = generate_point_labels(n_images, count_range, min_spacing, (size, size), seed)
    out = []
    for i, p in enumerate(labels):
        rng = np.random.default_rng([seed, 1000 + i])
        mask = sample_instance_mask(p, sampler, seed=int(rng.integers(2 ** 31)))
        img = render_phantom(mask, rng)
        out.append((img, mask, centroids_from_instances(mask)))
    return out
