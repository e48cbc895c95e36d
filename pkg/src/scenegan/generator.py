"""Layout-conditioned generator: mapping network, style-modulated U-Net,
2D-to-3D extrusion and the super-resolution head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import IndivisibleChannels, ShapeMismatch
from .layers import EqualConv2d, EqualLinear, lrelu
from .neural_field import FieldDecoder, NeuralField



@dataclass
class GeneratorConfig:
    resolution: int = 32  # N: layout and grid resolution
    field_channels: int = 16  # C
    style_dim: int = 64  # D
    class_count: int = 4  # S
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 2)  # from N down to the bottleneck
    bottleneck: int = 4
    representation: str = "extrusion"  # | "triplane" | "floorplan"
    feature_dim: int = 32
    decoder_hidden: int = 64
    upsample_factor: int = 2
    upsampler_channels: int = 32
    modulate_expansion: bool = False  # final N*C expansion conv stays unmodulated
    expansion_kernel: int = 1

    def __post_init__(self):
        n, b = self.resolution, self.bottleneck
        if n < b or n & (n - 1) or b & (b - 1):
            raise ValueError("resolution and bottleneck must be powers of two with N >= bottleneck")
        levels = int(math.log2(n // b)) + 1
        if len(self.channel_multipliers) != levels:
            raise ValueError(f"need {levels} channel multipliers, got {len(self.channel_multipliers)}")
        f = self.upsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError("upsample_factor must be a power of two")
        if self.expansion_kernel % 2 == 0:
            raise ValueError("expansion_kernel must be odd")
        self.channel_multipliers = tuple(self.channel_multipliers)

    @property
    def layout_channels(self) -> int:
        return 4 + self.class_count + self.style_dim

    @property
    def level_resolutions(self) -> list[int]:
        return [self.resolution >> i for i in range(len(self.channel_multipliers))]

    @property
    def output_channels(self) -> int:
        if self.representation == "extrusion":
            return self.resolution * self.field_channels
        if self.representation == "triplane":
            return 3 * self.field_channels
        if self.representation == "floorplan":
            return self.field_channels - 1
        raise ValueError(f"unknown representation {self.representation!r}")

    @property
    def decoder_in_features(self) -> int:
        # All three representations feed the same-width decoder MLP.
        return self.field_channels


def normalize_2nd_moment(z, eps=1e-8):
    return z * (z.square().mean(dim=1, keepdim=True) + eps).rsqrt()


class MappingNetwork(nn.Module):
    def __init__(self, dim: int, layers: int = 2):
        super().__init__()
        self.fcs = nn.ModuleList(EqualLinear(dim, dim, lr_mul=0.01) for _ in range(layers))

    def forward(self, z):
        x = normalize_2nd_moment(z)
        for fc in self.fcs:
            x = lrelu(fc(x))
        return x


class ModulatedConv2d(nn.Module):
    """Style-modulated convolution with optional weight demodulation.

    Modulation is applied to the input activations and demodulation to the
    output, which equals convolving with per-sample modulated weights.
    """

    def __init__(self, in_ch, out_ch, style_dim, kernel=3, demodulate=True, activate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.affine = EqualLinear(style_dim, in_ch, bias_init=1.0)
        self.scale = 1.0 / math.sqrt(in_ch * kernel * kernel)
        self.padding = kernel // 2
        self.demodulate = demodulate
        self.activate = activate

    def forward(self, x, w):
        styles = self.affine(w)  # (B, in)
        weight = self.weight * self.scale
        x = x * styles[:, :, None, None]
        x = F.conv2d(x, weight, padding=self.padding)
        if self.demodulate:
            # sum_{i,k} (W[o,i,k] * s[b,i])^2
            wsq = weight.square().sum(dim=(2, 3))  # (out, in)
            dcoef = (styles.square() @ wsq.t() + 1e-8).rsqrt()  # (B, out)
            x = x * dcoef[:, :, None, None]
        x = x + self.bias[None, :, None, None]
        return lrelu(x) if self.activate else x


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv0 = EqualConv2d(in_ch, out_ch, 3, padding=1)
        self.conv1 = EqualConv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return lrelu(self.conv1(lrelu(self.conv0(x))))


class UNetBackbone(nn.Module):
    """Encoder (plain convs + max-pool, style independent) and a decoder that
    starts from a learned bottleneck constant, concatenates encoder skips and
    is modulated by the mapped style code."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        chans = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.enc = nn.ModuleList()
        in_ch = cfg.layout_channels
        for ch in chans:
            self.enc.append(ConvBlock(in_ch, ch))
            in_ch = ch
        self.const = nn.Parameter(torch.randn(1, chans[-1], cfg.bottleneck, cfg.bottleneck))
        d = cfg.style_dim
        self.dec_first = ModulatedConv2d(2 * chans[-1], chans[-1], d)
        self.dec = nn.ModuleList()
        for lvl in range(len(chans) - 2, -1, -1):
            self.dec.append(nn.ModuleList([
                ModulatedConv2d(chans[lvl + 1] + chans[lvl], chans[lvl], d),
                ModulatedConv2d(chans[lvl], chans[lvl], d),
            ]))
        if cfg.modulate_expansion:
            self.expand = ModulatedConv2d(chans[0], cfg.output_channels, d, kernel=cfg.expansion_kernel,
                                          activate=False)
        else:
            k = cfg.expansion_kernel
            self.expand = EqualConv2d(chans[0], cfg.output_channels, k, padding=k // 2)

    def encode(self, layout):
        """Encoder activations at every level, highest resolution first."""
        cfg = self.cfg
        if layout.ndim != 4 or layout.shape[1:] != (cfg.layout_channels, cfg.resolution, cfg.resolution):
            raise ShapeMismatch(
                f"layout must be (B, {cfg.layout_channels}, {cfg.resolution}, {cfg.resolution}), "
                f"got {tuple(layout.shape)}")
        skips = []
        x = layout
        for i, block in enumerate(self.enc):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        return skips

    def decode(self, skips, w):
        x = self.const.expand(w.shape[0], -1, -1, -1)
        x = self.dec_first(torch.cat([x, skips[-1]], dim=1), w)
        for j, (c0, c1) in enumerate(self.dec):
            skip = skips[-2 - j]
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = c0(torch.cat([x, skip], dim=1), w)
            x = c1(x, w)
        if self.cfg.modulate_expansion:
            return self.expand(x, w)
        return self.expand(x)

    def forward(self, layout, w, skip_override=None):
        skips = self.encode(layout)
        if skip_override is not None:
            skips = skip_override(skips)
        return self.decode(skips, w)


def extrude(f2d: torch.Tensor, channels: int) -> torch.Tensor:
    """Reshape a (B, H*C, Z, X) feature image into a (B, C, Z, H, X) volume.

    Voxel (x, y, z, c) takes pixel (row=z, col=x), channel y*C + c. Pure reindexing.
    """
    b, ch, rows, cols = f2d.shape
    if ch % channels:
        raise IndivisibleChannels(f"{ch} channels do not split into blocks of {channels}")
    height = ch // channels
    return f2d.reshape(b, height, channels, rows, cols).permute(0, 2, 3, 1, 4)


def flatten_volume(volume: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`extrude`."""
    b, c, z, y, x = volume.shape
    return volume.permute(0, 3, 1, 2, 4).reshape(b, y * c, z, x)


class Upsampler(nn.Module):
    """Style-modulated super-resolution with an RGB skip path.

    The raw RGB (first three feature channels) is bilinearly upsampled and
    corrected by a modulated toRGB residual at every 2x stage.
    """

    def __init__(self, in_ch: int, style_dim: int, channels: int = 64, factor: int = 2):
        super().__init__()
        self.stages = nn.ModuleList()
        c = in_ch
        for _ in range(int(math.log2(factor))):
            self.stages.append(nn.ModuleList([
                ModulatedConv2d(c, channels, style_dim),
                ModulatedConv2d(channels, channels, style_dim),
                ModulatedConv2d(channels, 3, style_dim, kernel=1, demodulate=False, activate=False),
            ]))
            c = channels

    def forward(self, feat_img, w):
        x = feat_img
        rgb = feat_img[:, :3]
        for c0, c1, to_rgb in self.stages:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False)
            x = c1(c0(x, w), w)
            rgb = rgb + to_rgb(x, w)
        return rgb


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.style_dim)
        self.backbone = UNetBackbone(cfg)
        self.decoder = FieldDecoder(cfg.decoder_in_features, cfg.decoder_hidden, cfg.feature_dim)
        self.upsampler = Upsampler(cfg.feature_dim, cfg.style_dim, cfg.upsampler_channels, cfg.upsample_factor)

    def map_style(self, z):
        if z.shape[-1] != self.cfg.style_dim:
            raise ShapeMismatch(f"z must have length {self.cfg.style_dim}")
        return self.mapping(z)

    def unet_forward(self, layout, w):
        return self.backbone(layout, w)

    def to_representation(self, f2d):
        cfg = self.cfg
        if cfg.representation == "extrusion":
            return extrude(f2d, cfg.field_channels)
        if cfg.representation == "triplane":
            b, _, h, w = f2d.shape
            return f2d.reshape(b, 3, cfg.field_channels, h, w)
        return f2d

    def generate(self, layout, z):
        """The neural representation G(L, z); a feature volume for the extrusion variant."""
        return self.to_representation(self.unet_forward(layout, self.map_style(z)))

    def field(self, representation) -> NeuralField:
        return NeuralField(self.cfg.representation, representation, self.decoder)

    def upsample_render(self, feat_img, w):
        return self.upsampler(feat_img, w)
