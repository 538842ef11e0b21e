"""Instance masks <-> semantic + horizontal/vertical offset maps.

The encoding is three planes: the binary foreground, then per-instance
horizontal and vertical offsets to the instance centroid, each scaled by the
largest absolute offset of that instance so values lie in [-1, 1].
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as nnf
from scipy import ndimage
from skimage.segmentation import watershed

from .geometry import PointLabel

log = logging.getLogger(__name__)

HV_MAGIC = b"HVE1"

_SMOOTH = np.array([1.0, 4.0, 6.0, 4.0, 1.0])
_DERIV = np.array([-1.0, -2.0, 0.0, 2.0, 1.0])
# unit response to a unit ramp: sum(_SMOOTH) * sum(_DERIV * offsets) == 128
SOBEL_X = np.outer(_SMOOTH, _DERIV) / 128.0
SOBEL_Y = SOBEL_X.T.copy()
KERNEL_SIZE = 5


class GradientMaps(NamedTuple):
    dh: np.ndarray
    dv: np.ndarray


class DecodeThresholds(NamedTuple):
    seg: float = 0.5
    marker: float = 0.4
    min_area: int = 10


def encode_hv(mask: np.ndarray) -> np.ndarray:
    """Encode an instance mask as a float32 array of shape (3, H, W)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    out = np.zeros((3,) + mask.shape, dtype=np.float32)
    out[0] = mask > 0
    for idx, sl in enumerate(ndimage.find_objects(mask.astype(np.int64)), start=1):
        if sl is None:
            continue
        inst = mask[sl] == idx
        rr, cc = np.nonzero(inst)
        dr = rr - rr.mean()
        dc = cc - cc.mean()
        mr, mc = np.abs(dr).max(), np.abs(dc).max()
        h = dc / mc if mc > 0 else np.zeros_like(dc)
        v = dr / mr if mr > 0 else np.zeros_like(dr)
        rows, cols = rr + sl[0].start, cc + sl[1].start
        out[1, rows, cols] = h
        out[2, rows, cols] = v
    return out


def _kernels(dtype, device):
    kx = torch.as_tensor(SOBEL_X, dtype=dtype, device=device)
    ky = torch.as_tensor(SOBEL_Y, dtype=dtype, device=device)
    return kx.view(1, 1, 5, 5), ky.view(1, 1, 5, 5)


def sobel(x: torch.Tensor, axis: str) -> torch.Tensor:
    """Derivative of every channel of an (N, C, H, W) tensor along ``axis``.

    ``axis`` is ``"x"`` (along columns) or ``"y"`` (along rows). Borders use
    replicate padding so constant offsets have exactly zero derivative.
    """
    if x.shape[-1] < KERNEL_SIZE or x.shape[-2] < KERNEL_SIZE:
        raise ValueError(f"map {tuple(x.shape[-2:])} smaller than {KERNEL_SIZE}x{KERNEL_SIZE} kernel")
    kx, ky = _kernels(x.dtype, x.device)
    k = kx if axis == "x" else ky
    n, c, h, w = x.shape
    flat = nnf.pad(x.reshape(n * c, 1, h, w), (2, 2, 2, 2), mode="replicate")
    return nnf.conv2d(flat, k).reshape(n, c, h, w)


def spatial_gradient(m: np.ndarray, axis: str = "x") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D map")
    t = torch.from_numpy(m)[None, None]
    return sobel(t, axis)[0, 0].numpy()


def hv_gradients(h_map: np.ndarray, v_map: np.ndarray) -> GradientMaps:
    return GradientMaps(spatial_gradient(h_map, "x"), spatial_gradient(v_map, "y"))


def boundary_energy(h_map, v_map) -> np.ndarray:
    # offsets increase monotonically inside an instance, so only a falling
    # edge marks a boundary
    dh, dv = hv_gradients(h_map, v_map)
    return np.maximum(np.clip(-dh, 0.0, 1.0), np.clip(-dv, 0.0, 1.0))


def relabel_sequential(mask: np.ndarray) -> np.ndarray:
    """Map instance ids to 1..n in order of first appearance in raster order."""
    mask = np.asarray(mask)
    flat = mask.ravel()
    ids, first = np.unique(flat, return_index=True)
    order = ids[np.argsort(first)]
    order = order[order != 0]
    lut = np.zeros(int(flat.max(initial=0)) + 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return lut[mask]


def decode_instances(semantic_prob, h_map, v_map, thresholds: DecodeThresholds = DecodeThresholds()):
    """Recover an instance mask from predicted foreground and offset maps.

    Markers are the low-energy foreground cores; a marker-controlled watershed
    over the boundary energy grows them to fill the foreground. Foreground
    components that receive no marker become instances of their own when they
    are at least ``min_area`` pixels.
    """
    semantic_prob = np.asarray(semantic_prob, dtype=np.float64)
    h_map = np.asarray(h_map, dtype=np.float64)
    v_map = np.asarray(v_map, dtype=np.float64)
    if not (semantic_prob.shape == h_map.shape == v_map.shape):
        raise ValueError("maps must share one shape")
    fg = semantic_prob > thresholds.seg
    if not fg.any():
        return np.zeros(fg.shape, dtype=np.int32)
    energy = boundary_energy(h_map, v_map)
    markers, n = ndimage.label(fg & (energy < thresholds.marker))
    if n:
        sizes = np.bincount(markers.ravel(), minlength=n + 1)
        small = sizes < thresholds.min_area
        small[0] = False
        markers[small[markers]] = 0
    inst = watershed(energy, markers, mask=fg) if markers.any() else np.zeros(fg.shape, np.int32)

    orphans, n_orphan = ndimage.label(fg & (inst == 0))
    if n_orphan:
        sizes = np.bincount(orphans.ravel(), minlength=n_orphan + 1)
        next_id = int(inst.max()) + 1
        for k in np.flatnonzero(sizes >= thresholds.min_area):
            if k == 0:
                continue
            inst[orphans == k] = next_id
            next_id += 1
    return relabel_sequential(inst)


def centroids_from_instances(mask: np.ndarray) -> PointLabel:
    """One point per instance at its rounded mean pixel coordinate.

    Halves round toward the smaller index.
    """
    mask = np.asarray(mask)
    pts = []
    seen = set()
    for idx, sl in enumerate(ndimage.find_objects(mask.astype(np.int64)), start=1):
        if sl is None:
            continue
        rr, cc = np.nonzero(mask[sl] == idx)
        r = int(np.ceil(rr.mean() + sl[0].start - 0.5))
        c = int(np.ceil(cc.mean() + sl[1].start - 0.5))
        if (r, c) in seen:
            log.warning("instance %d shares its centroid (%d, %d); skipped", idx, r, c)
            continue
        seen.add((r, c))
        pts.append((r, c))
    return PointLabel(np.array(pts, dtype=np.int64).reshape(-1, 2), mask.shape)


def write_hv(path, hv: np.ndarray) -> None:
    hv = np.asarray(hv, dtype="<f4")
    if hv.ndim != 3 or hv.shape[0] != 3:
        raise ValueError("expected a (3, H, W) encoding")
    with open(path, "wb") as fh:
        fh.write(HV_MAGIC)
        fh.write(struct.pack("<ii", hv.shape[1], hv.shape[2]))
        fh.write(np.ascontiguousarray(hv).tobytes())


def read_hv(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != HV_MAGIC:
        raise ValueError(f"{path}: not an HVE1 file")
    h, w = struct.unpack("<ii", raw[4:12])
    body = np.frombuffer(raw[12:], dtype="<f4")
    if body.size != 3 * h * w:
        raise ValueError(f"{path}: truncated payload")
    return body.reshape(3, h, w).astype(np.float32)
