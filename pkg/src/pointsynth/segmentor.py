"""Downstream instance segmentation trained on synthetic pairs."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage

from .codec import DecodeThresholds, decode_instances, encode_hv, relabel_sequential
from .losses import instance_loss
from .networks import NetConfig, SegNet, build_segnet

log = logging.getLogger(__name__)


@dataclass
class SegTrainConfig:
    phase1_epochs: int = 10
    total_epochs: int = 50
    lr_init: float = 1e-3
    lr_step: int = 25
    lr_final: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_phase1: int = 8
    batch_phase2: int = 16
    crop: int = 256
    samples_per_epoch: int = 0
    flip: bool = True
    color_jitter: bool = True
    blur: bool = True
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.phase1_epochs < self.total_epochs:
            raise ValueError("need 0 <= phase1_epochs < total_epochs")
        if self.batch_phase1 < 1 or self.batch_phase2 < 1:
            raise ValueError("batch sizes must be >= 1")

    @property
    def augment(self) -> "AugmentFlags":
        return AugmentFlags(self.flip, self.color_jitter, self.blur, self.noise)


@dataclass
class AugmentFlags:
    flip: bool = True
    color_jitter: bool = True
    blur: bool = True
    noise: bool = True
    jitter: float = 0.1
    blur_sigma_max: float = 1.5
    noise_std: float = 0.02


def flip_target(target: np.ndarray, axis: str) -> np.ndarray:
    """Flip a 2-D mask or a (3, H, W) encoding; the flipped axis' offsets change sign."""
    if target.ndim == 2:
        return target[:, ::-1] if axis == "x" else target[::-1]
    out = target[:, :, ::-1].copy() if axis == "x" else target[:, ::-1].copy()
    out[1 if axis == "x" else 2] *= -1
    return out


def augment_pair(image: np.ndarray, target: np.ndarray, flags: AugmentFlags, rng: np.random.Generator):
    """Joint geometric and image-only photometric augmentation.

    ``image`` is H x W x 3 in [-1, 1]; ``target`` an instance mask or an
    encoding. With every flag off the inputs come back unchanged.
    """
    img, tgt = image, target
    if flags.flip:
        if rng.random() < 0.5:
            img, tgt = img[:, ::-1], flip_target(tgt, "x")
        if rng.random() < 0.5:
            img, tgt = img[::-1], flip_target(tgt, "y")
    if not (flags.color_jitter or flags.blur or flags.noise):
        return np.ascontiguousarray(img), np.ascontiguousarray(tgt)

    x = (np.asarray(img, dtype=np.float64) + 1.0) / 2.0
    if flags.color_jitter:
        j = flags.jitter
        b, c, s = rng.uniform(1 - j, 1 + j, size=3)
        x = x * b
        x = (x - x.mean()) * c + x.mean()
        gray = x.mean(axis=2, keepdims=True)
        x = (x - gray) * s + gray
    if flags.blur:
        sigma = rng.uniform(0.0, flags.blur_sigma_max)
        if sigma > 0:
            x = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0))
    if flags.noise:
        x = x + rng.normal(0.0, flags.noise_std, size=x.shape)
    img = (np.clip(x, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)
    return img, np.ascontiguousarray(tgt)


def param_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _crop_positions(size, crop):
    return math.ceil(size / crop)


def _sample(pairs, k, epoch, cfg: SegTrainConfig):
    rng = np.random.default_rng([cfg.seed, epoch, k])
    image, mask = pairs[int(rng.integers(len(pairs)))]
    h, w = mask.shape
    c = cfg.crop
    if h < c or w < c:
        ph, pw = max(0, c - h), max(0, c - w)
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="edge")
        mask = np.pad(mask, ((0, ph), (0, pw)))
        h, w = mask.shape
    top, left = int(rng.integers(0, h - c + 1)), int(rng.integers(0, w - c + 1))
    img = image[top:top + c, left:left + c]
    m = relabel_sequential(mask[top:top + c, left:left + c])
    img, m = augment_pair(img, m, cfg.augment, rng)
    return img, encode_hv(m)


def train_segmentor(pairs, config: SegTrainConfig, net_config: NetConfig | None = None,
                    model: SegNet | None = None):
    """Two-phase training: decoders only, then everything.

    Returns ``(model, log)`` where ``log`` holds one record per epoch.
    """
    if not pairs:
        raise ValueError("no training pairs")
    net_config = net_config or NetConfig(crop=config.crop)
    if model is None:
        torch.manual_seed(config.seed)
        model = build_segnet(net_config)
    model.train()
    if config.samples_per_epoch:
        per_epoch = config.samples_per_epoch
    else:
        per_epoch = sum(_crop_positions(m.shape[0], config.crop) * _crop_positions(m.shape[1], config.crop)
                        for _, m in pairs)
    records = []
    opt = None
    for epoch in range(config.total_epochs):
        phase = 1 if epoch < config.phase1_epochs else 2
        if opt is None or epoch == config.phase1_epochs:
            model.encoder.requires_grad_(phase == 2)
            params = list(model.decoder_parameters()) if phase == 1 else list(model.parameters())
            opt = torch.optim.Adam(params, lr=config.lr_init, betas=(config.beta1, config.beta2))
        lr = config.lr_init if epoch < config.lr_step else config.lr_final
        for group in opt.param_groups:
            group["lr"] = lr
        batch = config.batch_phase1 if phase == 1 else config.batch_phase2
        losses = []
        for start in range(0, per_epoch, batch):
            samples = [_sample(pairs, k, epoch, config) for k in range(start, min(start + batch, per_epoch))]
            x = torch.from_numpy(np.stack([s[0].transpose(2, 0, 1) for s in samples])).float()
            y = torch.from_numpy(np.stack([s[1] for s in samples])).float()
            out = model(x)
            l_hv, l_seg = instance_loss(out.hv, out.seg, y)
            loss = l_hv + l_seg
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}: hv={float(l_hv)} seg={float(l_seg)}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        records.append({"epoch": epoch, "phase": phase, "lr": lr, "loss": float(np.mean(losses))})
        log.debug("seg epoch %d phase %d loss %.4f", epoch, phase, records[-1]["loss"])
    model.requires_grad_(True)
    model.eval()
    return model, records


def _positions(size, tile, overlap):
    if size <= tile:
        return [0]
    stride = tile - overlap
    pos = list(range(0, size - tile, stride))
    return pos + [size - tile]


def predict_maps(model: SegNet, image: np.ndarray, tile: int = 256, overlap: int = 32):
    """Tiled forward pass; returns (foreground prob, h map, v map).

    Raw outputs are averaged where tiles overlap before the output
    nonlinearities are applied.
    """
    if overlap < 0 or overlap >= tile:
        raise ValueError("overlap must lie in [0, tile)")
    h, w = image.shape[:2]
    ph, pw = max(0, tile - h), max(0, tile - w)
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(image, dtype=np.float32).transpose(2, 0, 1)))[None]
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode="replicate")
    H, W = x.shape[-2:]
    acc = torch.zeros(1, 3, H, W)
    cnt = torch.zeros(1, 1, H, W)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for top in _positions(H, tile, overlap):
            for left in _positions(W, tile, overlap):
                out = model(x[..., top:top + tile, left:left + tile])
                acc[..., top:top + tile, left:left + tile] += torch.cat([out.seg_logit, out.hv_raw], dim=1)
                cnt[..., top:top + tile, left:left + tile] += 1
    model.train(was_training)
    raw = (acc / cnt)[0, :, :h, :w]
    prob = torch.sigmoid(raw[0]).numpy()
    hv = torch.tanh(raw[1:]).numpy()
    return prob, hv[0], hv[1]


def predict_instances(model: SegNet, image: np.ndarray, tile: int = 256, overlap: int = 32,
                      thresholds: DecodeThresholds = DecodeThresholds()) -> np.ndarray:
    prob, h_map, v_map = predict_maps(model, image, tile, overlap)
    return decode_instances(prob, h_map, v_map, thresholds)


def save_segmentor(path, model: SegNet, net_config: NetConfig, config: SegTrainConfig, log_records=()):
    torch.save({"net_config": asdict(net_config), "seg_config": asdict(config),
                "state_dict": model.state_dict(), "log": list(log_records)}, path)


def load_segmentor(path):
    ck = torch.load(path, map_location="cpu", weights_only=False)
    net_config = NetConfig(**ck["net_config"])
    model = build_segnet(net_config)
    model.load_state_dict(ck["state_dict"])
    model.eval()
    return model, net_config, SegTrainConfig(**ck["seg_config"])
