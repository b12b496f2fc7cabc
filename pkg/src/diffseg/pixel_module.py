"""Backbone and pixel decoder producing the stride 32/16/8/4 feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

STRIDES = (32, 16, 8, 4)


@dataclass
class PyramidFeatures:
    """``B x C x H/S x W/S`` maps; ``f_pixel`` is the stride-4 level."""

    f32: torch.Tensor
    f16: torch.Tensor
    f8: torch.Tensor
    f_pixel: torch.Tensor

    @property
    def levels(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (self.f32, self.f16, self.f8)


def _groups(ch: int) -> int:
    # at least two channels per group so 1x1 maps still normalize
    for g in (8, 4, 2):
        if ch % g == 0 and ch // g >= 2:
            return g
    return 1


def conv_block(cin: int, cout: int, stride: int = 1, k: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.GroupNorm(_groups(cout), cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Stem at stride 2, then five stride-2 stages reaching strides 4..64."""

    def __init__(self, widths=(32, 48, 64, 96, 128, 128)):
        super().__init__()
        self.stem = conv_block(3, widths[0], stride=2)
        self.stages = nn.ModuleList(
            nn.Sequential(conv_block(widths[i], widths[i + 1], stride=2), conv_block(widths[i + 1], widths[i + 1]))
            for i in range(5)
        )
        self.out_channels = tuple(widths[1:])

    def forward(self, x):
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs  # strides 4, 8, 16, 32, 64


class PixelDecoder(nn.Module):
    """Nearest upsample + 1x1 lateral fusion + 3x3 smoothing, from stride 64 down to 4."""

    def __init__(self, in_channels, dim: int):
        super().__init__()
        c4, c8, c16, c32, c64 = in_channels
        self.low = nn.Conv2d(c64, dim, 1)
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1) for c in (c32, c16, c8, c4))
        self.smooth = nn.ModuleList(conv_block(dim, dim) for _ in range(4))
        self.pixel_proj = nn.Conv2d(dim, dim, 1)

    def forward(self, feats):
        s4, s8, s16, s32, s64 = feats
        y = self.low(s64)
        outs = []
        for lat, smooth, skip in zip(self.lateral, self.smooth, (s32, s16, s8, s4)):
            y = F.interpolate(y, size=skip.shape[-2:], mode="nearest") + lat(skip)
            y = smooth(y)
            outs.append(y)
        f32, f16, f8, f4 = outs
        return PyramidFeatures(f32, f16, f8, self.pixel_proj(f4))


class PixelModule(nn.Module):
    def __init__(self, dim: int = 64, widths=(32, 48, 64, 96, 128, 128)):
        super().__init__()
        self.dim = dim
        self.backbone = Backbone(widths)
        self.decoder = PixelDecoder(self.backbone.out_channels, dim)

    def forward(self, image: torch.Tensor) -> PyramidFeatures:
        return extract_features(image, self)


def extract_features(image: torch.Tensor, module: PixelModule) -> PyramidFeatures:
    """Run the pixel module on a ``3 x H x W`` image or a ``B x 3 x H x W`` batch.

    H and W must be multiples of 32. Single images come back with a batch
    axis of one.
    """
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected 3 x H x W image(s), got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ValueError(f"image size {h}x{w} is not a multiple of 32")
    return module.decoder(module.backbone(image))
