"""Dual-image critic with an attached segmentation decoder for the top-down summary."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch
from .layers import EqualConv2d, EqualLinear, lrelu
from .neural_field import sample_trilinear

SQRT2 = math.sqrt(2.0)


def resize(img, size):
    return F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)


def make_dual(final_rgb: torch.Tensor, raw_rgb: torch.Tensor) -> torch.Tensor:
    """Concatenate the final image with the raw low-res render resized to match: (B, 6, H, W)."""
    size = final_rgb.shape[-1]
    if raw_rgb.shape[-1] != size:
        raw_rgb = resize(raw_rgb, size)
    return torch.cat([final_rgb, raw_rgb], dim=1)


def make_real_dual(real: torch.Tensor, factor: int) -> torch.Tensor:
    """Real images get a second half blurred by area-downsampling then bilinear upsampling."""
    size = real.shape[-1]
    if factor == 1:
        return torch.cat([real, real], dim=1)
    low = F.avg_pool2d(real, factor)
    return torch.cat([real, resize(low, size)], dim=1)


@dataclass
class DiscriminatorConfig:
    img_resolution: int = 64
    in_channels: int = 6
    base_channels: int = 32
    max_channels: int = 128
    summary_resolution: int = 32  # N, where the summary adapter joins the trunk
    summary_channels: int = 128  # k * C
    num_classes: int = 5  # S + 1

    def channels(self, res: int) -> int:
        return min(self.base_channels * self.img_resolution // res, self.max_channels)


class DownBlock(nn.Module):
    """Two 3x3 convs and a 2x average-pool, with a 1x1 residual path."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv0 = EqualConv2d(in_ch, in_ch, 3, padding=1)
        self.conv1 = EqualConv2d(in_ch, out_ch, 3, padding=1)
        self.skip = EqualConv2d(in_ch, out_ch, 1, bias=False)

    def forward(self, x):
        y = lrelu(self.conv0(x))
        y = F.avg_pool2d(lrelu(self.conv1(y)), 2)
        s = F.avg_pool2d(self.skip(x), 2)
        return (y + s) / SQRT2


class UpBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.conv0 = EqualConv2d(in_ch + skip_ch, out_ch, 3, padding=1)
        self.conv1 = EqualConv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = lrelu(self.conv0(torch.cat([x, skip], dim=1)))
        return lrelu(self.conv1(x))


class Discriminator(nn.Module):
    """Residual image critic whose trunk doubles as the encoder of a segmentation U-Net.

    ``forward`` scores dual images. ``segment`` feeds the top-down summary in
    through a 1x1 adapter at the trunk level of matching resolution, runs the
    remaining shared blocks, then a symmetric decoder with skips emits
    per-pixel class logits.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        res = cfg.img_resolution
        self.from_rgb = EqualConv2d(cfg.in_channels, cfg.channels(res), 1)
        self.resolutions = []
        self.blocks = nn.ModuleList()
        while res > 4:
            self.blocks.append(DownBlock(cfg.channels(res), cfg.channels(res // 2)))
            self.resolutions.append(res)
            res //= 2
        c4 = cfg.channels(4)
        self.epi_conv = EqualConv2d(c4, c4, 3, padding=1)
        self.epi_fc = EqualLinear(c4 * 16, c4)
        self.epi_out = EqualLinear(c4, 1)

        n = cfg.summary_resolution
        if n not in self.resolutions:
            raise ValueError(f"summary resolution {n} must be a trunk level {self.resolutions}")
        self.seg_start = self.resolutions.index(n)
        self.seg_adapter = EqualConv2d(cfg.summary_channels, cfg.channels(n), 1)
        self.seg_up = nn.ModuleList()
        r = 4
        while r < n:
            self.seg_up.append(UpBlock(cfg.channels(r), cfg.channels(2 * r), cfg.channels(2 * r)))
            r *= 2
        self.seg_out = EqualConv2d(cfg.channels(n), cfg.num_classes, 1)

    def forward(self, dual):
        x = lrelu(self.from_rgb(dual))
        for block in self.blocks:
            x = block(x)
        x = lrelu(self.epi_conv(x))
        x = lrelu(self.epi_fc(x.flatten(1)))
        return self.epi_out(x)[:, 0]

    def segment(self, summary):
        """Per-pixel class logits (B, S+1, N, N) for a (B, k*C, N, N) summary."""
        cfg = self.cfg
        if summary.shape[1:] != (cfg.summary_channels, cfg.summary_resolution, cfg.summary_resolution):
            raise ShapeMismatch(f"unexpected summary shape {tuple(summary.shape)}")
        # per-sample standardization: feature scale is the generator's to choose,
        # so without it the segmentation path can be driven to divergence
        summary = F.layer_norm(summary, summary.shape[1:])
        x = lrelu(self.seg_adapter(summary))
        skips = [x]
        for block in self.blocks[self.seg_start:]:
            x = block(x)
            skips.append(x)
        skips.pop()
        for up in self.seg_up:
            x = up(x, skips.pop())
        return self.seg_out(x)


def disc_forward(disc: Discriminator, dual):
    return disc(dual)


def summary_heights(k: int, dtype=torch.float64) -> torch.Tensor:
    """k equidistant heights strictly inside (-1, 1)."""
    return -1.0 + (torch.arange(k, dtype=dtype) + 0.5) * (2.0 / k)


def build_topdown_summary(representation, k: int, sigma_jitter: float, generator=None,
                          resolution: int | None = None, sampler=sample_trilinear):
    """Stack k jittered height samples per floorplan pixel: (B, k*C, N, N).

    Channel ``j*C + c`` holds feature ``c`` at height ``j``. Rows index z and
    columns index x, as in the layout grid. ``generator`` is a torch RNG for the
    jitter; with ``sigma_jitter == 0`` the result is deterministic.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    b = representation.shape[0]
    n = resolution if resolution is not None else representation.shape[-1]
    dtype = representation.dtype
    c = -1.0 + (torch.arange(n, dtype=dtype) + 0.5) * (2.0 / n)
    zz, xx = torch.meshgrid(c, c, indexing="ij")
    y = summary_heights(k, dtype)[:, None, None].expand(k, n, n)
    y = y[None].expand(b, k, n, n)
    if sigma_jitter > 0:
        noise = torch.randn((b, k, n, n), generator=generator, dtype=dtype)
        y = y + sigma_jitter * noise
    pts = torch.stack([xx[None, None].expand(b, k, n, n), y, zz[None, None].expand(b, k, n, n)], dim=-1)
    feats = sampler(representation, pts.reshape(b, -1, 3))  # (B, k*N*N, C)
    ch = feats.shape[-1]
    return feats.reshape(b, k, n, n, ch).permute(0, 1, 4, 2, 3).reshape(b, k * ch, n, n)


def segment_topdown(disc: Discriminator, summary):
    return disc.segment(summary)


def layout_loss(logits, labels):
    """Mean per-pixel cross entropy, empty class included."""
    if logits.ndim != 4 or labels.shape != (logits.shape[0], *logits.shape[2:]):
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    return F.cross_entropy(logits, labels.long())
