"""UNet generator, segmentation subnetwork and patch discriminator."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from oarseg.networks.spec import NetworkKind, NetworkSpec


def _norm(channels: int, mode: str) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=True) if mode == "instance" else nn.Identity()


class ConvBlock(nn.Sequential):
    def __init__(self, cin, cout, norm="instance", stride=1, kernel=3):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, padding_mode="reflect"),
            _norm(cout, norm),
            nn.LeakyReLU(0.2),
        )


class UpBlock(nn.Module):
    """x2 upsampling; nearest-neighbour resize + conv avoids the uneven kernel overlap of transposed convs."""

    def __init__(self, cin, cout, mode="nearest", norm="instance"):
        super().__init__()
        self.mode = mode
        if mode == "nearest":
            self.conv = nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")
        else:
            self.conv = nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)
        self.norm = _norm(cout, norm)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x):
        if self.mode == "nearest":
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.act(self.norm(self.conv(x)))


class UNet(nn.Module):
    """Encoder of ``depth`` stride-2 convolutions (channels ``base * 2**i``), symmetric skips.

    With ``base=64, depth=3`` the encoder features have 64, 128 and 256
    channels at 1/2, 1/4 and 1/8 resolution.
    """

    def __init__(self, in_channels, out_channels, base=64, depth=3, upsample="nearest", norm="instance", out_activation=None):
        super().__init__()
        self.depth = depth
        stem_ch = max(base // 2, 1)
        self.stem = ConvBlock(in_channels, stem_ch, norm)
        chans = [base * 2**i for i in range(depth)]
        self.encoder_channels = tuple(chans)
        self.down = nn.ModuleList()
        prev = stem_ch
        for c in chans:
            self.down.append(ConvBlock(prev, c, norm, stride=2))
            prev = c
        self.bottleneck = ConvBlock(prev, prev, norm)
        skips = [stem_ch] + chans[:-1]
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for skip in reversed(skips):
            self.up.append(UpBlock(prev, skip, upsample, norm))
            self.merge.append(ConvBlock(2 * skip, skip, norm))
            prev = skip
        self.head = nn.Conv2d(prev, out_channels, 1)
        self.out_activation = out_activation

    def forward(self, x):
        k = 2**self.depth
        if x.shape[-1] % k or x.shape[-2] % k:
            raise ValueError(f"input size {tuple(x.shape[-2:])} not divisible by {k}")
        if min(x.shape[-2:]) < 2 * k:
            # instance norm and reflect padding need at least 2x2 at the bottleneck
            raise ValueError(f"input size {tuple(x.shape[-2:])} below the minimum {2 * k}")
        feats = [self.stem(x)]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        h = self.bottleneck(feats.pop())
        for up, merge in zip(self.up, self.merge):
            h = merge(torch.cat([up(h), feats.pop()], dim=1))
        h = self.head(h)
        if self.out_activation == "tanh":
            h = torch.tanh(h)
        return h


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic producing one score per overlapping patch."""

    def __init__(self, in_channels=1, base=64, depth=3, norm="instance", head="linear"):
        super().__init__()
        layers = []
        prev = in_channels
        for i in range(depth):
            c = base * 2**i
            layers += [nn.Conv2d(prev, c, 4, stride=2, padding=1), _norm(c, norm), nn.LeakyReLU(0.2)]
            prev = c
        layers += [nn.Conv2d(prev, prev, 4, stride=1, padding=1), _norm(prev, norm), nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(prev, 1, 4, stride=1, padding=1))
        self.body = nn.Sequential(*layers)
        self.depth = depth
        self.sigmoid = head == "sigmoid"

    def forward(self, x):
        s = self.body(x)
        return torch.sigmoid(s) if self.sigmoid else s

    @property
    def stride(self) -> int:
        return 2**self.depth


def discriminator_geometry(depth: int, size: int) -> tuple[int, int]:
    """``(output side, receptive field)`` of :class:`PatchDiscriminator` on a ``size`` input."""
    out, rf, jump = size, 1, 1
    for _ in range(depth):
        out = (out + 2 - 4) // 2 + 1
        rf += 3 * jump
        jump *= 2
    for _ in range(2):
        out = out + 2 - 4 + 1
        rf += 3 * jump
    return out, rf


def build_generator(spec: NetworkSpec) -> UNet:
    if spec.kind != NetworkKind.GENERATOR:
        raise ValueError(f"build_generator needs a generator spec, got {spec.kind.value}")
    return UNet(spec.in_channels, spec.out_channels, spec.base_channels, spec.depth, spec.upsample, spec.norm, "tanh")


def build_seg_subnetwork(spec: NetworkSpec) -> UNet:
    if spec.kind != NetworkKind.SEG_SUBNET:
        raise ValueError(f"build_seg_subnetwork needs a seg_subnet spec, got {spec.kind.value}")
    return UNet(spec.in_channels, spec.out_channels, spec.base_channels, spec.depth, spec.upsample, spec.norm, None)


def build_discriminator(spec: NetworkSpec) -> PatchDiscriminator:
    if spec.kind != NetworkKind.DISCRIMINATOR:
        raise ValueError(f"build_discriminator needs a discriminator spec, got {spec.kind.value}")
    return PatchDiscriminator(spec.in_channels, spec.base_channels, spec.depth, spec.norm, spec.head)
