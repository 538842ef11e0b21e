"""Unpaired mask <-> image training and paired-data synthesis."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import encode_hv, relabel_sequential
from .config import config_hash, substream_seed
from .geometry import PointLabel, SamplerConfig, dilate_points, sample_instance_mask
from .losses import (discriminator_loss, generator_adv_loss, image_cycle_loss, instance_loss,
                     point_consistency_loss)
from .networks import NetConfig, NetworkBundle, build_networks

log = logging.getLogger(__name__)

LOSS_TERMS = ("d_image", "d_mask", "g_image", "g_mask", "cycle_image", "hv", "seg", "point", "total")


class NonFiniteLossError(RuntimeError):
    def __init__(self, components):
        self.components = components
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss: {detail}")


class CheckpointMismatch(RuntimeError):
    pass


@dataclass
class LossWeights:
    w_adv: float = 1.0
    w_cycle_image: float = 10.0
    w_instance: float = 1.0
    w_point: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class SynthTrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 8
    crop: int = 256
    epochs: int = 4000
    decay_epochs: int = 1000
    flip: bool = True
    w_adv: float = 1.0
    w_cycle_image: float = 10.0
    w_instance: float = 1.0
    w_point: float = 1.0
    point_radius: float = 2.0
    seed: int = 0
    max_steps: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 1:
            raise ValueError("batch and epochs must be >= 1")
        if not 0 <= self.decay_epochs <= self.epochs:
            raise ValueError("decay_epochs must lie in [0, epochs]")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_adv, self.w_cycle_image, self.w_instance, self.w_point)


def lr_factor(epoch: int, epochs: int, decay_epochs: int) -> float:
    """Constant, then linear to zero over the last ``decay_epochs`` epochs."""
    start = epochs - decay_epochs
    if decay_epochs == 0 or epoch < start:
        return 1.0
    return max(0.0, 1.0 - (epoch - start) / decay_epochs)


@dataclass
class TrainState:
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    noise_gen: torch.Generator
    step: int = 0
    epoch: int = 0
    batch_index: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, bundle: NetworkBundle, cfg: SynthTrainConfig):
        betas = (cfg.beta1, cfg.beta2)
        opt_G = torch.optim.Adam(list(bundle.G.parameters()) + list(bundle.F.parameters()),
                                 lr=cfg.lr, betas=betas)
        opt_D = torch.optim.Adam(list(bundle.D_X.parameters()) + list(bundle.D_S.parameters()),
                                 lr=cfg.lr, betas=betas)
        gen = torch.Generator().manual_seed(substream_seed(cfg.seed, "noise"))
        return cls(opt_G, opt_D, gen)

    def set_lr(self, lr):
        for opt in (self.opt_G, self.opt_D):
            for group in opt.param_groups:
                group["lr"] = lr


def _set_requires_grad(modules, flag):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def draw_noise(G, batch, height, width, generator):
    shape = G.noise_shape(batch, height, width)
    if shape[1] == 0:
        return None
    return torch.randn(shape, generator=generator)


def _check_finite(components):
    vals = {k: float(v.detach()) for k, v in components.items()}
    if not all(math.isfinite(v) for v in vals.values()):
        raise NonFiniteLossError(vals)
    return vals


def train_synthesis_step(bundle: NetworkBundle, batch: dict, weights: LossWeights, state: TrainState,
                         point_radius: float = 2.0) -> dict:
    """One alternating update: discriminators first, then G and F together.

    ``batch`` holds float tensors ``image`` (N, 3, H, W) in [-1, 1], ``hv``
    (N, 3, H, W) encodings of masks sampled from the images' own point
    labels, and ``points``: a boolean (N, 1, H, W) map of dilated points.
    """
    G, F, D_X, D_S = bundle.G, bundle.F, bundle.D_X, bundle.D_S
    x, s, pts = batch["image"], batch["hv"], batch["points"]
    n, _, h, w = x.shape

    noise = draw_noise(G, n, h, w, state.noise_gen)
    noise_cyc = draw_noise(G, n, h, w, state.noise_gen)
    fake_x = G(s, noise)
    out_x = F(x)
    fake_s = out_x.as_encoding()

    _set_requires_grad([D_X, D_S], True)
    state.opt_D.zero_grad(set_to_none=True)
    d_image = discriminator_loss(D_X(x), D_X(fake_x.detach()))
    d_mask = discriminator_loss(D_S(s), D_S(fake_s.detach()))
    _check_finite({"d_image": d_image, "d_mask": d_mask})
    (d_image + d_mask).backward()
    state.opt_D.step()

    _set_requires_grad([D_X, D_S], False)
    state.opt_G.zero_grad(set_to_none=True)
    g_image = generator_adv_loss(D_X(fake_x))
    g_mask = generator_adv_loss(D_S(fake_s))
    rec_s = F(fake_x)
    seg_fake = rec_s.seg
    l_hv, l_seg = instance_loss(rec_s.hv, seg_fake, s)
    cycle = image_cycle_loss(G(fake_s, noise_cyc), x)
    if weights.w_point > 0:
        point = point_consistency_loss(seg_fake, out_x.seg, pts, point_radius)
    else:
        with torch.no_grad():
            point = point_consistency_loss(seg_fake, out_x.seg, pts, point_radius)
    total = (weights.w_adv * (g_image + g_mask) + weights.w_cycle_image * cycle
             + weights.w_instance * (l_hv + l_seg) + weights.w_point * point)
    report = _check_finite({"d_image": d_image, "d_mask": d_mask, "g_image": g_image, "g_mask": g_mask,
                            "cycle_image": cycle, "hv": l_hv, "seg": l_seg, "point": point,
                            "total": total})
    total.backward()
    state.opt_G.step()
    _set_requires_grad([D_X, D_S], True)
    return report


# ---------------------------------------------------------------------------
# data

@dataclass
class SynthItem:
    image: np.ndarray          # H x W x 3 float in [-1, 1]
    points: PointLabel
    name: str = ""


def make_batch(items, indices, epoch: int, cfg: SynthTrainConfig, sampler: SamplerConfig):
    """Assemble a training batch; every sample's randomness derives from
    (seed, epoch, item index) only."""
    imgs, hvs, pts = [], [], []
    c = cfg.crop
    for idx in indices:
        item = items[idx]
        rng = np.random.default_rng([cfg.seed, epoch, int(idx)])
        h, w = item.image.shape[:2]
        if h < c or w < c:
            raise ValueError(f"{item.name or idx}: image {h}x{w} smaller than crop {c}")
        mask = sample_instance_mask(item.points, sampler, seed=int(rng.integers(2 ** 31)))
        top, left = int(rng.integers(0, h - c + 1)), int(rng.integers(0, w - c + 1))
        img = item.image[top:top + c, left:left + c]
        m = relabel_sequential(mask[top:top + c, left:left + c])
        pmap = dilate_points(item.points.crop(top, left, c, c), cfg.point_radius)
        if cfg.flip:
            if rng.random() < 0.5:
                img, m, pmap = img[:, ::-1], m[:, ::-1], pmap[:, ::-1]
            if rng.random() < 0.5:
                img, m, pmap = img[::-1], m[::-1], pmap[::-1]
        imgs.append(np.ascontiguousarray(img.transpose(2, 0, 1)))
        hvs.append(encode_hv(np.ascontiguousarray(m)))
        pts.append(np.ascontiguousarray(pmap)[None])
    return {"image": torch.from_numpy(np.stack(imgs)).float(),
            "hv": torch.from_numpy(np.stack(hvs)).float(),
            "points": torch.from_numpy(np.stack(pts))}


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, bundle: NetworkBundle, state: TrainState, cfg: SynthTrainConfig,
                    sampler: SamplerConfig):
    torch.save({
        "net_config": asdict(bundle.config),
        "train_config": asdict(cfg),
        "sampler_config": asdict(sampler),
        "config_hash": config_hash(bundle.config, cfg, sampler),
        "networks": bundle.state_dict(),
        "opt_G": state.opt_G.state_dict(),
        "opt_D": state.opt_D.state_dict(),
        "noise_rng": state.noise_gen.get_state(),
        "step": state.step, "epoch": state.epoch, "batch_index": state.batch_index,
        "history": state.history,
        "trained": bundle.trained,
    }, path)


def load_checkpoint(path, cfg: SynthTrainConfig | None = None, sampler: SamplerConfig | None = None,
                    force: bool = False):
    """Restore ``(bundle, state, train_config, sampler_config)``.

    When ``cfg``/``sampler`` are given they must hash to the stored value
    unless ``force`` is set.
    """
    ck = torch.load(path, map_location="cpu", weights_only=False)
    net_cfg = NetConfig(**ck["net_config"])
    stored_cfg = SynthTrainConfig(**ck["train_config"])
    stored_sampler = SamplerConfig(**ck["sampler_config"])
    cfg = cfg or stored_cfg
    sampler = sampler or stored_sampler
    if config_hash(net_cfg, cfg, sampler) != ck["config_hash"] and not force:
        raise CheckpointMismatch(f"{path}: config hash differs from checkpoint; pass force to resume")
    bundle = build_networks(net_cfg)
    bundle.load_state_dict(ck["networks"])
    bundle.trained = ck["trained"]
    state = TrainState.create(bundle, cfg)
    state.opt_G.load_state_dict(ck["opt_G"])
    state.opt_D.load_state_dict(ck["opt_D"])
    state.noise_gen.set_state(ck["noise_rng"])
    state.step, state.epoch, state.batch_index = ck["step"], ck["epoch"], ck["batch_index"]
    state.history = list(ck["history"])
    return bundle, state, cfg, sampler


def write_loss_log(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step", "epoch") + LOSS_TERMS)
        for row in history:
            writer.writerow([row["step"], row["epoch"]] + [repr(row[k]) for k in LOSS_TERMS])


def train_synthesis(bundle: NetworkBundle, items, cfg: SynthTrainConfig, sampler: SamplerConfig,
                    state: TrainState | None = None, out_dir=None) -> TrainState:
    """Run (or resume) the training loop until ``epochs`` or ``max_steps``."""
    if not items:
        raise ValueError("no training items")
    state = state or TrainState.create(bundle, cfg)
    weights = cfg.weights
    bundle.train()
    n = len(items)
    per_epoch = math.ceil(n / cfg.batch)
    out_dir = Path(out_dir) if out_dir else None
    done = False
    while state.epoch < cfg.epochs and not done:
        state.set_lr(cfg.lr * lr_factor(state.epoch, cfg.epochs, cfg.decay_epochs))
        order = np.random.default_rng([cfg.seed, state.epoch, 2 ** 31]).permutation(n)
        while state.batch_index < per_epoch:
            if cfg.max_steps and state.step >= cfg.max_steps:
                done = True
                break
            b = state.batch_index
            batch = make_batch(items, order[b * cfg.batch:(b + 1) * cfg.batch], state.epoch, cfg, sampler)
            report = train_synthesis_step(bundle, batch, weights, state, cfg.point_radius)
            state.step += 1
            state.batch_index += 1
            state.history.append({"step": state.step, "epoch": state.epoch, **report})
            if state.step % 100 == 0:
                log.info("step %d epoch %d total %.4f", state.step, state.epoch, report["total"])
        if not done:
            state.epoch += 1
            state.batch_index = 0
            if out_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoint.pt", bundle, state, cfg, sampler)
    bundle.trained = True
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.pt", bundle, state, cfg, sampler)
        write_loss_log(out_dir / "losses.csv", state.history)
    return state


# ---------------------------------------------------------------------------
# synthesis

def _pad_to(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = torch.nn.functional.pad(x, (0, pw, 0, ph))
    return x


def generate_image(bundle: NetworkBundle, hv: np.ndarray, noise_seed: int | None) -> np.ndarray:
    """Translate one (3, H, W) encoding to an H x W x 3 image in [-1, 1].

    ``noise_seed=None`` feeds zero noise.
    """
    G = bundle.G
    h, w = hv.shape[-2:]
    mult = 2 ** bundle.config.depth if G.noise_channels else 4
    x = _pad_to(torch.from_numpy(np.asarray(hv, dtype=np.float32))[None], mult)
    noise = None
    if G.noise_channels and noise_seed is not None:
        gen = torch.Generator().manual_seed(int(noise_seed))
        noise = draw_noise(G, 1, x.shape[-2], x.shape[-1], gen)
    was_training = G.training
    G.eval()
    with torch.no_grad():
        y = G(x, noise)[0, :, :h, :w]
    G.train(was_training)
    return y.permute(1, 2, 0).numpy().copy()


def synthesize_dataset(bundle: NetworkBundle, point_labels, sampler_config: SamplerConfig,
                       n_variants: int = 1, seed: int = 0, sources=None):
    """Sample one mask per point label and render ``n_variants`` images of it.

    Returns ``(pairs, manifest)``: ``pairs`` is a list of (image, mask) and
    ``manifest`` one provenance record per pair.
    """
    if not bundle.trained:
        raise RuntimeError("refusing to synthesize with an untrained network bundle")
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    sources = list(sources) if sources is not None else ["generated"] * len(point_labels)
    pairs, manifest = [], []
    for i, p in enumerate(point_labels):
        mask_seed = substream_seed(seed, "mask", i)
        mask = sample_instance_mask(p, sampler_config, seed=mask_seed)
        hv = encode_hv(mask)
        for v in range(n_variants):
            noise_seed = substream_seed(seed, "noise", i, v)
            img = generate_image(bundle, hv, noise_seed)
            pairs.append((img, mask))
            manifest.append({"label_index": i, "variant": v, "label_source": sources[i],
                             "mask_seed": mask_seed, "noise_seed": noise_seed, "seed": seed,
                             "n_points": len(p)})
    return pairs, manifest
