"""Unmasked-face decoder and patch discriminator.

The decoder is U-Net-like: it rebuilds a face from the identity feature
map, concatenating encoder skips at matching resolutions. Before entering
the decoder, each skip can be purified by the mask information suppression
(MIS) step: the attention map is reduced over channels, upsampled to the
skip's resolution and multiplied in, damping occluded areas. A pooled
style vector from the identity feature modulates the per-block feature
statistics (scale and shift after instance normalization).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .model_core import EncoderOutput, ModelConfig

VALID_SC_COUNTS = (0, 1, 3)


@dataclass
class SuppressedSkips:
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor


def upsample_attention(phi: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Channel-mean of the attention map, bilinearly resized to ``size``."""
    m = phi.mean(dim=1, keepdim=True)
    if m.shape[-2:] == tuple(size):
        return m
    return F.interpolate(m, size=size, mode="bilinear", align_corners=False)


def suppress_skips(enc: EncoderOutput, phi: torch.Tensor) -> SuppressedSkips:
    """Weight every encoder skip by the upsampled attention map."""
    outs = []
    for f in (enc.f1, enc.f2, enc.f3):
        u = upsample_attention(phi, f.shape[-2:])
        outs.append(f * u)
    return SuppressedSkips(*outs)


def plain_skips(enc: EncoderOutput) -> SuppressedSkips:
    """Identity pass-through, used when MIS is disabled or no map exists."""
    return SuppressedSkips(enc.f1, enc.f2, enc.f3)


class StyleBlock(nn.Module):
    """Residual conv block whose normalized features are scaled/shifted by the style."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm1 = nn.InstanceNorm2d(out_ch)
        self.norm2 = nn.InstanceNorm2d(out_ch)
        self.style1 = nn.Linear(style_dim, 2 * out_ch)
        self.style2 = nn.Linear(style_dim, 2 * out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.LeakyReLU(0.2)

    @staticmethod
    def _modulate(x, params):
        gamma, beta = params.chunk(2, dim=1)
        return x * (1.0 + gamma[:, :, None, None]) + beta[:, :, None, None]

    def forward(self, x, style):
        h = self.act(self._modulate(self.norm1(self.conv1(x)), self.style1(style)))
        h = self._modulate(self.norm2(self.conv2(h)), self.style2(style))
        return self.act(h + self.skip(x))


class Decoder(nn.Module):
    """4 upsampling style-modulated blocks with configurable skip count.

    ``sc_count`` selects how many encoder connections are concatenated:
    0 none, 1 only the deepest (f3), 3 all of f1..f3.
    """

    def __init__(self, cfg: ModelConfig, sc_count: int = 3, style_dim: int = 128,
                 id_channels: int | None = None):
        super().__init__()
        if sc_count not in VALID_SC_COUNTS:
            raise ValueError(f"sc_count must be one of {VALID_SC_COUNTS}, got {sc_count}")
        self.cfg = cfg
        self.sc_count = sc_count
        c1, c2, c3, c4 = cfg.channels
        cid = c4 if id_channels is None else id_channels  # halved when MDM is off

        self.style_mlp = nn.Sequential(
            nn.Linear(cid, style_dim),
            nn.SiLU(),
            nn.Linear(style_dim, style_dim),
        )
        d3, d2, d1, d0 = c3, c2, c1, max(c1 // 2, 16)
        self.conv_in = nn.Conv2d(cid, d3, 3, padding=1)
        self.block3 = StyleBlock(d3 + (c3 if sc_count >= 1 else 0), d2, style_dim)
        self.block2 = StyleBlock(d2 + (c2 if sc_count >= 3 else 0), d1, style_dim)
        self.block1 = StyleBlock(d1 + (c1 if sc_count >= 3 else 0), d0, style_dim)
        self.block0 = StyleBlock(d0, d0, style_dim)
        self.conv_out = nn.Conv2d(d0, 3, 3, padding=1)

    def style_vector(self, x_id: torch.Tensor) -> torch.Tensor:
        return self.style_mlp(x_id.mean(dim=(2, 3)))

    def forward(self, skips: SuppressedSkips, x_id: torch.Tensor,
                style: torch.Tensor | None = None) -> torch.Tensor:
        if style is None:
            style = self.style_vector(x_id)

        def up(t):
            return F.interpolate(t, scale_factor=2, mode="nearest")

        h = self.conv_in(x_id)
        h = up(h)
        if self.sc_count >= 1:
            h = self._cat(h, skips.f3)
        h = self.block3(h, style)
        h = up(h)
        if self.sc_count >= 3:
            h = self._cat(h, skips.f2)
        h = self.block2(h, style)
        h = up(h)
        if self.sc_count >= 3:
            h = self._cat(h, skips.f1)
        h = self.block1(h, style)
        h = self.block0(up(h), style)
        return torch.tanh(self.conv_out(h))

    @staticmethod
    def _cat(h, skip):
        if h.shape[-2:] != skip.shape[-2:]:
            raise ValueError(
                f"skip spatial size {tuple(skip.shape[-2:])} does not match "
                f"decoder feature {tuple(h.shape[-2:])}"
            )
        return torch.cat([h, skip], dim=1)


class PatchDiscriminator(nn.Module):
    """Strided conv stack scoring overlapping patches; raw (unsquashed) outputs.

    Three stride-2 stages map an S x S image to an S/8 x S/8 score map
    (112 -> 14). No normalization layers, so interior scores are
    shift-equivariant up to border effects.
    """

    def __init__(self, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 3, stride=1, padding=1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        return self.net(images)
