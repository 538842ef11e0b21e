"""File formats: point CSVs, 16-bit instance PNGs, RGB PNGs and manifests."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import PointLabel

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")


def write_points_csv(path, p: PointLabel) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("row", "col"))
        writer.writerows(p.points.tolist())


def read_points_csv(path, canvas_size) -> PointLabel:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["row", "col"]:
            raise ValueError(f"{path}: expected header 'row,col'")
        pts = [(int(r), int(c)) for r, c in reader]
    return PointLabel(np.array(pts, dtype=np.int64).reshape(-1, 2), canvas_size)


def write_mask_png(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.max(initial=0) > 65535 or mask.min(initial=0) < 0:
        raise ValueError("instance ids must fit in 16 bits")
    Image.fromarray(mask.astype(np.uint16)).save(path)


def read_mask_png(path) -> np.ndarray:
    arr = np.array(Image.open(path))
    if arr.ndim == 3:
        # colour-coded label images: one id per distinct colour
        flat = arr.reshape(-1, arr.shape[-1])
        _, inv = np.unique(flat, axis=0, return_inverse=True)
        bg = np.all(flat == 0, axis=1)
        inv = inv.reshape(-1) + 1
        inv[bg] = 0
        arr = inv.reshape(arr.shape[:2])
    return arr.astype(np.int32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(image: np.ndarray) -> np.ndarray:
    return (np.asarray(image, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def read_image(path) -> np.ndarray:
    """Read any RGB(A)/gray image as H x W x 3 uint8."""
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    Image.fromarray(arr, mode="RGB").save(path)


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def list_images(directory) -> list[Path]:
    d = Path(directory)
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
