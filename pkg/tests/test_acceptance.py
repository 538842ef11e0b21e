"""Acceptance gate: one test per criterion, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion. Criteria 6 to 8 share a single training
fixture (three small GAN configurations, 2000 steps each, about 25 CPU
minutes).
"""
import math
import time

import numpy as np
import pytest
import torch
import torch.nn as nn
from scipy import ndimage, stats
from torch.nn.utils.parametrizations import spectral_norm

from pointsynth.cli import main as cli_main
from pointsynth.codec import decode_instances, encode_hv
from pointsynth.geometry import (PointLabel, SamplerConfig, dilate_points, generate_point_labels,
                                 sample_ellipse_params, sample_ellipses, sample_instance_mask)
from pointsynth.losses import (adversarial_losses, image_cycle_loss, instance_loss, point_consistency_loss)
from pointsynth.metrics import FeatureSet, aji, fid, kid, object_dice, pixel_metrics, sample_diversity
from pointsynth.networks import NetConfig, build_networks
from pointsynth.phantom import make_phantom_set
from pointsynth.segmentor import SegTrainConfig, predict_instances, train_segmentor
from pointsynth.synthesis import SynthItem, SynthTrainConfig, generate_image, synthesize_dataset, train_synthesis

from oracles import aji_bruteforce, central_differences, object_dice_bruteforce


def detail(record_property, text):
    record_property("detail", text)


# ---------------------------------------------------------------------------
# 1. gradients

class ToyD(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = spectral_norm(nn.Conv2d(3, 4, 3))
        self.c2 = nn.Conv2d(4, 1, 3)

    def forward(self, x):
        return self.c2(torch.tanh(self.c1(x)))


class ToyG(nn.Module):
    def __init__(self):
        super().__init__()
        self.c = nn.Conv2d(3, 3, 3, padding=1)

    def forward(self, s):
        return torch.tanh(self.c(s))


class ToyF(nn.Module):
    def __init__(self):
        super().__init__()
        self.c = nn.Conv2d(3, 3, 3, padding=1)

    def forward(self, x):
        y = self.c(x)
        return torch.tanh(y[:, 1:]), torch.sigmoid(y[:, :1])


def rel_error(loss_fn, params):
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    numeric = central_differences(loss_fn, params, eps=1e-4)
    a = torch.cat([g.flatten() for g in analytic])
    n = torch.cat([g.flatten() for g in numeric])
    return float((a - n).norm() / max(float(n.norm()), 1e-12))


@pytest.mark.criterion(1, "gradient suite: analytic vs central differences, rel err < 1e-4")
def test_criterion_1_gradients(record_property):
    t0 = time.time()
    torch.manual_seed(0)
    G, F, D = ToyG().double(), ToyF().double(), ToyD().double()
    D.eval()  # freeze the power iteration so the loss is a fixed function of the weights
    n_params = [sum(p.numel() for p in m.parameters()) for m in (G, F, D)]
    assert max(n_params) <= 1000

    x = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 2 - 1
    mask = np.zeros((8, 8), int)
    mask[1:4, 1:5], mask[5:8, 3:7] = 1, 2
    s = torch.from_numpy(np.stack([encode_hv(mask), encode_hv(mask.T)])).double()
    points = [PointLabel([(2, 2), (6, 5)], (8, 8)), PointLabel([(2, 2), (5, 6)], (8, 8))]

    errors = {
        "adversarial D": rel_error(lambda: adversarial_losses(D(x), D(G(s).detach()))[0], D.parameters()),
        "adversarial G": rel_error(lambda: adversarial_losses(None, D(G(s)))[1], G.parameters()),
        "instance hv": rel_error(lambda: instance_loss(*F(G(s)), s)[0], list(F.parameters()) + list(G.parameters())),
        "instance seg": rel_error(lambda: instance_loss(*F(G(s)), s)[1], list(F.parameters()) + list(G.parameters())),
        "point": rel_error(lambda: point_consistency_loss(F(G(s))[1], F(x)[1], points, 1.0),
                           list(F.parameters()) + list(G.parameters())),
        "cycle": rel_error(lambda: image_cycle_loss(G(torch.cat([F(x)[1], F(x)[0]], 1)), x),
                           list(G.parameters()) + list(F.parameters())),
    }
    worst = max(errors, key=errors.get)
    elapsed = time.time() - t0
    detail(record_property, f"max rel err {errors[worst]:.2e} ({worst}), {elapsed:.1f}s")
    for name, err in errors.items():
        assert err < 1e-4, f"{name}: relative error {err:.3e}"
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. metric oracles

@pytest.mark.criterion(2, "metric oracles: aji/object_dice match brute force to 1e-9; pixel metrics exact")
def test_criterion_2_metric_oracles(record_property):
    t0 = time.time()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        gt, pred = rng.integers(0, 5, size=(16, 16)), rng.integers(0, 5, size=(16, 16))
        worst = max(worst, abs(aji(pred, gt) - aji_bruteforce(pred, gt)),
                    abs(object_dice(pred, gt) - object_dice_bruteforce(pred, gt)))
    assert worst < 1e-9

    gt = np.zeros((5, 5), int)
    gt[1:3, 1:3] = 1
    plus = gt.copy()
    plus[3, 1] = 1
    hand = [(aji(gt, gt), 1.0), (aji(plus, gt), 0.8), (object_dice(gt, gt), 1.0),
            (object_dice(plus, gt), 8 / 9), (object_dice(np.zeros_like(gt), gt), 0.0),
            (aji(np.zeros_like(gt), np.zeros_like(gt)), 1.0), (aji(gt, np.zeros_like(gt)), 0.0)]
    for got, want in hand:
        assert abs(got - want) < 1e-9

    a = np.zeros((4, 4), bool)
    a[0:2, 0:2] = True
    b = np.zeros((4, 4), bool)
    b[0:2, 1:3] = True
    assert pixel_metrics(a, a) == (1.0, 1.0)
    assert pixel_metrics(a, ~a) == (0.0, 0.0)
    assert pixel_metrics(a, b) == (1 / 3, 0.5)
    assert pixel_metrics(np.zeros_like(a), np.zeros_like(a)) == (1.0, 1.0)
    # every 2x3 binary pair, against direct set counting
    for i in range(64):
        for j in range(64):
            p = np.array([(i >> k) & 1 for k in range(6)], bool).reshape(2, 3)
            g = np.array([(j >> k) & 1 for k in range(6)], bool).reshape(2, 3)
            inter, union, tot = (p & g).sum(), (p | g).sum(), p.sum() + g.sum()
            want = (1.0, 1.0) if union == 0 else (inter / union, 2 * inter / tot)
            assert pixel_metrics(p, g) == want
    elapsed = time.time() - t0
    detail(record_property, f"max |delta| {worst:.1e} over 100 random masks, {elapsed:.1f}s")
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 3. FID / KID

def _fs(values):
    return FeatureSet(np.asarray(values, float).reshape(len(values), -1), "test")


@pytest.mark.criterion(3, "FID closed form within 1e-6; fid(a,a) < 1e-6; kid(a,a) within 3 block-std of 0")
def test_criterion_3_fid_kid(record_property):
    t0 = time.time()
    h = 1 / math.sqrt(2)  # {-h, h} has mean 0 and unbiased variance 1
    shift = fid(_fs([-h, h]), _fs([1 - h, 1 + h]))
    scale = fid(_fs([-h, h]), _fs([-2 * h, 2 * h]))
    assert abs(shift - 1.0) < 1e-6 and abs(scale - 1.0) < 1e-6
    a = _fs(np.random.default_rng(0).normal(size=(3000, 16)))
    self_fid = fid(a, a)
    assert abs(self_fid) < 1e-6
    k_mean, k_std = kid(a, a, block_size=1000)
    assert abs(k_mean) <= 3 * k_std or abs(k_mean) <= 1e-6
    assert kid(_fs([1.0, 0.0]), _fs([2.0, 3.0]))[0] == pytest.approx(279.0, abs=1e-9)
    assert kid(_fs(np.zeros((5, 3))), _fs(np.zeros((7, 3))))[0] == 0.0
    elapsed = time.time() - t0
    detail(record_property, f"shift {shift:.9f}, scale {scale:.9f}, fid(a,a) {self_fid:.1e}, "
                            f"kid(a,a) {k_mean:.1e}±{k_std:.1e}, {elapsed:.1f}s")
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 4. codec round trip

def min_gap(mask):
    """Smallest background gap (in pixels) separating two different instances."""
    gap = np.inf
    for k in range(1, int(mask.max()) + 1):
        others = (mask > 0) & (mask != k)
        if others.any():
            dist = ndimage.distance_transform_edt(mask != k)
            gap = min(gap, dist[others].min() - 1)
    return gap


@pytest.mark.criterion(4, "codec round trip: AJI >= 0.95 on 50 masks with >= 3 px gaps, exact counts")
def test_criterion_4_codec_round_trip(record_property):
    t0 = time.time()
    cfg = SamplerConfig(area_min=40, area_max=1200, overlap_kappa=0.25)
    labels = generate_point_labels(50, (20, 40), 16, (160, 160), seed=2024)
    scores, count_ok, gaps = [], 0, []
    for i, p in enumerate(labels):
        m = sample_instance_mask(p, cfg, seed=i)
        gaps.append(min_gap(m))
        hv = encode_hv(m)
        d = decode_instances(hv[0], hv[1], hv[2])
        scores.append(aji(d, m))
        count_ok += int(d.max() == m.max())
    elapsed = time.time() - t0
    detail(record_property, f"min AJI {min(scores):.4f}, exact counts {count_ok}/50, min gap {min(gaps):.1f}px, "
                            f"{elapsed:.1f}s")
    assert min(gaps) >= 3
    assert min(scores) >= 0.95
    assert count_ok == 50
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 5. sampler statistics

@pytest.mark.criterion(5, "sampler: areas in [a, b], angle KS < 0.02 over 1e4 draws, seed ownership on 100 masks")
def test_criterion_5_sampler(record_property):
    t0 = time.time()
    cfg = SamplerConfig()
    labels = generate_point_labels(100, (30, 80), 8, (256, 256), seed=7)
    owned = 0
    for i, p in enumerate(labels):
        ellipses, dens = sample_ellipses(p, cfg, np.random.default_rng(i))
        areas = np.array([e.area for e in ellipses])
        assert np.all(areas >= dens.area_lower) and np.all(areas <= dens.area_upper)
        m = sample_instance_mask(p, cfg, seed=i)
        ids = m[p.points[:, 0], p.points[:, 1]]
        owned += int(np.all(ids > 0) and len(set(ids.tolist())) == len(p) and m.max() == len(p))
    rng = np.random.default_rng(0)
    angles = [sample_ellipse_params((0, 0), 40.0, 400.0, rng).angle for _ in range(10_000)]
    ks = stats.kstest(angles, stats.uniform(0, math.pi).cdf).statistic
    elapsed = time.time() - t0
    detail(record_property, f"KS {ks:.4f}, ownership {owned}/100, {elapsed:.1f}s")
    assert ks < 0.02
    assert owned == 100
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 6 and 7. short GAN training

SMOKE_NET = dict(base_width=8, depth=3, noise_channels=8, crop=128, res_blocks=2, spade_hidden=16, disc_width=8,
                 disc_layers=3)
SMOKE_SAMPLER = SamplerConfig(area_min=30, area_max=150, overlap_kappa=0.45)
SMOKE_CONFIGS = {"plain": dict(plain_cyclegan=True, w_point=0.0),
                 "noise": dict(plain_cyclegan=False, w_point=0.0),
                 "noise+point": dict(plain_cyclegan=False, w_point=1.0)}


@pytest.fixture(scope="session")
def smoke_runs():
    """Train the three configurations once; evaluate diversity and point probability."""
    data = make_phantom_set(4, 128, seed=0)
    items = [SynthItem(img, pts, f"crop{i}") for i, (img, _, pts) in enumerate(data)]
    results = {}
    for name, opts in SMOKE_CONFIGS.items():
        t0 = time.time()
        net = NetConfig(plain_cyclegan=opts["plain_cyclegan"], **SMOKE_NET)
        bundle = build_networks(net, seed=0)
        cfg = SynthTrainConfig(batch=1, crop=128, epochs=10_000, decay_epochs=0, max_steps=2000,
                               w_point=opts["w_point"], seed=0)
        train_synthesis(bundle, items, cfg, SMOKE_SAMPLER)
        bundle.eval()
        divs, probs = [], []
        for i, it in enumerate(items):
            hv = encode_hv(sample_instance_mask(it.points, SMOKE_SAMPLER, seed=999 + i))
            imgs = [generate_image(bundle, hv, 1000 * i + v) for v in range(10)]
            divs.append(sample_diversity(imgs))
            pmap = dilate_points(it.points, 2)
            with torch.no_grad():
                for im in imgs:
                    seg = bundle.F(torch.from_numpy(im.transpose(2, 0, 1).copy())[None]).seg[0, 0].numpy()
                    probs.append(float(seg[pmap].mean()))
        results[name] = {"bundle": bundle, "diversity": float(np.mean(divs)), "point_prob": float(np.mean(probs)),
                         "seconds": time.time() - t0}
    return results


@pytest.mark.slow
@pytest.mark.criterion(6, "diversity: noise config > 1e-3, plain config <= 1e-6 after 2000 steps")
def test_criterion_6_diversity(smoke_runs, record_property):
    div = {k: v["diversity"] for k, v in smoke_runs.items()}
    secs = sum(v["seconds"] for v in smoke_runs.values())
    detail(record_property, ", ".join(f"{k} {v:.3g}" for k, v in div.items()) + f", {secs / 60:.1f} min")
    assert div["noise+point"] > 1e-3
    assert div["noise"] > 1e-3
    assert div["plain"] <= 1e-6
    assert secs < 2 * 3600


@pytest.mark.slow
@pytest.mark.criterion(7, "point regularization: F_seg(G(s)) at points >= 0.8 and above the unconstrained config")
def test_criterion_7_point_probability(smoke_runs, record_property):
    with_point = smoke_runs["noise+point"]["point_prob"]
    without = smoke_runs["noise"]["point_prob"]
    detail(record_property, f"w_point=1: {with_point:.5f}, w_point=0: {without:.5f}")
    assert with_point >= 0.8
    assert without < with_point


# ---------------------------------------------------------------------------
# 8. segmentation overfit

@pytest.mark.slow
@pytest.mark.criterion(8, "segmentation overfit: 8 synthetic pairs, 50 epochs -> Dice >= 0.85, AJI >= 0.6")
def test_criterion_8_segmentation_overfit(smoke_runs, record_property):
    t0 = time.time()
    bundle = smoke_runs["noise+point"]["bundle"]
    labels = generate_point_labels(8, (12, 20), 14, (128, 128), seed=8)
    pairs, _ = synthesize_dataset(bundle, labels, SMOKE_SAMPLER, n_variants=1, seed=8)
    cfg = SegTrainConfig(total_epochs=50, crop=64, seed=0)
    model, records = train_segmentor(pairs, cfg, NetConfig(base_width=16, depth=3, crop=64))
    dice, ajis = [], []
    for img, m in pairs:
        pred = predict_instances(model, img, tile=128, overlap=0)
        dice.append(pixel_metrics(pred, m)[1])
        ajis.append(aji(pred, m))
    elapsed = time.time() - t0
    detail(record_property, f"Dice {np.mean(dice):.3f}, AJI {np.mean(ajis):.3f}, "
                            f"final loss {records[-1]['loss']:.3f}, {elapsed / 60:.1f} min")
    assert [r["phase"] for r in records].count(1) == cfg.phase1_epochs
    assert np.mean(dice) >= 0.85
    assert np.mean(ajis) >= 0.6


# ---------------------------------------------------------------------------
# 9. determinism

PIPELINE_INI = """
[experiment]
phantom_train = 2
phantom_test = 2
phantom_size = 64
label_canvas = 64, 64
n_synthetic = 2 4

[sampler]
area_min = 30
area_max = 150
overlap_kappa = 0.45
count_min = 3
count_max = 6
min_spacing = 14

[network]
base_width = 4
depth = 2
noise_channels = 4
crop = 64
res_blocks = 1
spade_hidden = 8
disc_width = 4

[synth_train]
batch = 1
crop = 64
epochs = 4
decay_epochs = 2

[seg_network]
base_width = 4
depth = 2
crop = 64

[seg_train]
phase1_epochs = 1
total_epochs = 3
lr_step = 2
crop = 64
batch_phase1 = 2
batch_phase2 = 2

[eval]
tile = 64
overlap = 16
diversity_variants = 3
"""


@pytest.mark.criterion(9, "determinism: two full `run`s with the same config and seed give identical report CSVs")
def test_criterion_9_determinism(tmp_path, record_property):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(PIPELINE_INI)
    reports = []
    for name in ("first", "second"):
        assert cli_main(["run", "--config", str(cfg), "--seed", "11", "--out", str(tmp_path / name)]) == 0
        reports.append((tmp_path / name / "report.csv").read_bytes())
    assert cli_main(["run", "--config", str(cfg), "--seed", "12", "--out", str(tmp_path / "other")]) == 0
    other = (tmp_path / "other" / "report.csv").read_bytes()
    detail(record_property, f"{len(reports[0].splitlines())} report rows, identical={reports[0] == reports[1]}, "
                            f"seed 12 differs={other != reports[0]}")
    assert reports[0] == reports[1]
    assert other != reports[0]


# ---------------------------------------------------------------------------
# 10. full scale

@pytest.mark.criterion(10, "full-scale mode (documented in README, not run in CI)")
def test_criterion_10_full_scale():
    pytest.skip("needs the real dataset and GPU-days; see README 'Full-scale mode'")
