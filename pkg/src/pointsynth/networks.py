"""Network builders: mask-to-image generators, the two-branch image-to-mask
network (also the downstream segmentor) and patch discriminators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as nnf
from torch.nn.utils.parametrizations import spectral_norm

from .config import ConfigError, from_mapping


@dataclass
class NetConfig:
    base_width: int = 64
    depth: int = 4
    noise_channels: int = 64
    crop: int = 256
    plain_cyclegan: bool = False
    res_blocks: int = 6
    spade_hidden: int = 128
    disc_width: int = 64
    disc_layers: int = 3

    def validate(self):
        bad = []
        if self.base_width < 1:
            bad.append("base_width")
        if self.depth < 1:
            bad.append("depth")
        if self.noise_channels < 0:
            bad.append("noise_channels")
        if self.crop < 1 or self.crop % (2 ** max(self.depth, 2)):
            bad.append("crop")
        if self.res_blocks < 0:
            bad.append("res_blocks")
        if self.spade_hidden < 1:
            bad.append("spade_hidden")
        if self.disc_width < 1:
            bad.append("disc_width")
        if self.disc_layers < 1:
            bad.append("disc_layers")
        if bad:
            raise ConfigError(f"invalid network config key(s): {', '.join(bad)}")
        return self


def _act():
    return nn.LeakyReLU(0.2)


# ---------------------------------------------------------------------------
# generators

class SPADE(nn.Module):
    def __init__(self, channels, cond_channels, hidden):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, cond):
        actv = self.shared(cond)
        return self.norm(x) * (1 + self.gamma(actv)) + self.beta(actv)


class SPADEResBlock(nn.Module):
    def __init__(self, fin, fout, cond_channels, hidden):
        super().__init__()
        mid = min(fin, fout)
        self.norm_0 = SPADE(fin, cond_channels, hidden)
        self.conv_0 = nn.Conv2d(fin, mid, 3, padding=1)
        self.norm_1 = SPADE(mid, cond_channels, hidden)
        self.conv_1 = nn.Conv2d(mid, fout, 3, padding=1)
        self.learned_shortcut = fin != fout
        if self.learned_shortcut:
            self.norm_s = SPADE(fin, cond_channels, hidden)
            self.conv_s = nn.Conv2d(fin, fout, 1, bias=False)
        self.act = _act()

    def forward(self, x, cond):
        x_s = self.conv_s(self.norm_s(x, cond)) if self.learned_shortcut else x
        dx = self.conv_0(self.act(self.norm_0(x, cond)))
        dx = self.conv_1(self.act(self.norm_1(dx, cond)))
        return x_s + dx


class OASISGenerator(nn.Module):
    """Spatially-adaptive generator with noise in every block.

    The conditioning map of each block is the encoding (nearest resize)
    concatenated with one noise draw at the coarsest resolution, bilinearly
    resized to the block's resolution. The input layer sees the same pair.
    """

    def __init__(self, cfg: NetConfig, label_channels=3):
        super().__init__()
        self.depth = cfg.depth
        self.noise_channels = cfg.noise_channels
        cond = label_channels + cfg.noise_channels
        chs = [cfg.base_width * min(2 ** (cfg.depth - i), 8) for i in range(cfg.depth + 1)]
        self.fc = nn.Conv2d(cond, chs[0], 3, padding=1)
        self.blocks = nn.ModuleList(
            SPADEResBlock(chs[i], chs[min(i + 1, cfg.depth)], cond, cfg.spade_hidden)
            for i in range(cfg.depth + 1))
        self.conv_img = nn.Conv2d(chs[-1], 3, 3, padding=1)
        self.act = _act()

    def noise_shape(self, batch, height, width):
        s = 2 ** self.depth
        return (batch, self.noise_channels, height // s, width // s)

    def _cond(self, hv, noise, size):
        seg = nnf.interpolate(hv, size=size, mode="nearest")
        if noise is None or self.noise_channels == 0:
            return seg
        z = nnf.interpolate(noise, size=size, mode="bilinear", align_corners=False)
        return torch.cat([seg, z], dim=1)

    def forward(self, hv, noise=None):
        n, _, h, w = hv.shape
        if self.noise_channels and noise is None:
            noise = hv.new_zeros(self.noise_shape(n, h, w))
        s = 2 ** self.depth
        size = (h // s, w // s)
        x = self.fc(self._cond(hv, noise, size))
        for i, block in enumerate(self.blocks):
            x = block(x, self._cond(hv, noise, x.shape[-2:]))
            if i < self.depth:
                x = nnf.interpolate(x, scale_factor=2, mode="nearest")
        return torch.tanh(self.conv_img(self.act(x)))


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch, affine=True))

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Plain CycleGAN generator; deterministic, ignores any noise argument."""

    noise_channels = 0

    def __init__(self, cfg: NetConfig, in_channels=3):
        super().__init__()
        b = cfg.base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, b, 7),
                  nn.InstanceNorm2d(b, affine=True), nn.ReLU()]
        ch = b
        for _ in range(2):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(ch * 2, affine=True), nn.ReLU()]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(cfg.res_blocks)]
        for _ in range(2):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(ch, ch // 2, 3, padding=1),
                       nn.InstanceNorm2d(ch // 2, affine=True), nn.ReLU()]
            ch //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(ch, 3, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def noise_shape(self, batch, height, width):
        return (batch, 0, height, width)

    def forward(self, hv, noise=None):
        return self.model(hv)


# ---------------------------------------------------------------------------
# image -> (offset maps, foreground)

class SegOutput(NamedTuple):
    hv_raw: torch.Tensor
    seg_logit: torch.Tensor

    @property
    def hv(self):
        return torch.tanh(self.hv_raw)

    @property
    def seg(self):
        return torch.sigmoid(self.seg_logit)

    def as_encoding(self):
        """Stack into the 3-channel (foreground, h, v) layout."""
        return torch.cat([self.seg, self.hv], dim=1)


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                         nn.InstanceNorm2d(cout, affine=True), _act())


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig, in_channels=3):
        super().__init__()
        b = cfg.base_width
        self.chs = [b * min(2 ** i, 8) for i in range(cfg.depth + 1)]
        self.stem = _conv_block(in_channels, self.chs[0])
        self.downs = nn.ModuleList(
            nn.Sequential(_conv_block(self.chs[i], self.chs[i + 1], stride=2),
                          _conv_block(self.chs[i + 1], self.chs[i + 1]))
            for i in range(cfg.depth))

    def forward(self, x):
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        return feats


class Decoder(nn.Module):
    def __init__(self, chs, out_channels):
        super().__init__()
        self.ups = nn.ModuleList(
            nn.Sequential(_conv_block(chs[i + 1] + chs[i], chs[i]), _conv_block(chs[i], chs[i]))
            for i in reversed(range(len(chs) - 1)))
        self.head = nn.Conv2d(chs[0], out_channels, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            x = nnf.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = up(torch.cat([x, skip], dim=1))
        return self.head(x)


class SegNet(nn.Module):
    """Shared encoder with an offset-map branch and a foreground branch."""

    def __init__(self, cfg: NetConfig, in_channels=3):
        super().__init__()
        self.multiple = 2 ** cfg.depth
        self.encoder = Encoder(cfg, in_channels)
        self.decoder_hv = Decoder(self.encoder.chs, 2)
        self.decoder_seg = Decoder(self.encoder.chs, 1)

    def decoder_parameters(self):
        yield from self.decoder_hv.parameters()
        yield from self.decoder_seg.parameters()

    def forward(self, x) -> SegOutput:
        feats = self.encoder(x)
        return SegOutput(self.decoder_hv(feats), self.decoder_seg(feats))


# ---------------------------------------------------------------------------
# discriminators

class PatchDiscriminator(nn.Module):
    def __init__(self, in_channels, width=64, n_layers=3):
        super().__init__()
        layers = [spectral_norm(nn.Conv2d(in_channels, width, 4, stride=2, padding=1)), _act()]
        ch = width
        for _ in range(1, n_layers):
            nxt = min(ch * 2, width * 8)
            layers += [spectral_norm(nn.Conv2d(ch, nxt, 4, stride=2, padding=1)), _act()]
            ch = nxt
        nxt = min(ch * 2, width * 8)
        layers += [spectral_norm(nn.Conv2d(ch, nxt, 4, padding=1)), _act(),
                   spectral_norm(nn.Conv2d(nxt, 1, 4, padding=1))]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


@dataclass
class NetworkBundle:
    G: nn.Module
    F: SegNet
    D_X: PatchDiscriminator
    D_S: PatchDiscriminator
    config: NetConfig
    trained: bool = False
    meta: dict = field(default_factory=dict)

    def modules(self):
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_S": self.D_S}

    def train(self, mode=True):
        for m in self.modules().values():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {k: m.state_dict() for k, m in self.modules().items()}

    def load_state_dict(self, state):
        for k, m in self.modules().items():
            m.load_state_dict(state[k])


def build_segnet(config) -> SegNet:
    cfg = config if isinstance(config, NetConfig) else from_mapping(NetConfig, config, "network")
    return SegNet(cfg.validate())


def build_networks(config, seed: int | None = None) -> NetworkBundle:
    """Build G, F, D_X and D_S; ``plain_cyclegan`` selects the residual G without noise."""
    cfg = config if isinstance(config, NetConfig) else from_mapping(NetConfig, config, "network")
    cfg.validate()
    if seed is not None:
        torch.manual_seed(seed)
    G = ResnetGenerator(cfg) if cfg.plain_cyclegan else OASISGenerator(cfg)
    F = SegNet(cfg)
    D_X = PatchDiscriminator(3, cfg.disc_width, cfg.disc_layers)
    D_S = PatchDiscriminator(3, cfg.disc_width, cfg.disc_layers)
    return NetworkBundle(G, F, D_X, D_S, cfg)
