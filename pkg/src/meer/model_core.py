"""Encoder, mask decoupling module and embedding heads.

The encoder is a 4-stage residual CNN whose stage outputs f1..f3 feed the
decoder's skip connections and whose final hybrid feature map X carries
entangled identity and occlusion information. The mask decoupling module
(MDM) produces an attention map in (0, 1) from channel and spatial
branches; multiplying X by the map and its complement splits it into an
identity part and a mask part, each consumed by its own head.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

TOY_CHANNELS = (32, 64, 128, 256)
FULL_CHANNELS = (64, 128, 256, 512)

ATTENTION_EPS = 1e-6  # keeps the merged map strictly inside (0, 1)


@dataclass
class ModelConfig:
    image_size: int = 112
    channels: tuple = TOY_CHANNELS
    embed_dim: int = 512
    mask_head_hidden: int = 128
    grid_size: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ValueError(f"need 4 stage widths, got {self.channels}")
        if self.image_size % 16 != 0 or self.image_size < 16:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")

    @property
    def feature_size(self) -> int:
        return self.image_size // 16

    @property
    def num_pattern_classes(self) -> int:
        g = self.grid_size
        return (g * (g + 1) // 2) ** 2 + 1


@dataclass
class EncoderOutput:
    f1: torch.Tensor  # C1 x H/2  x W/2
    f2: torch.Tensor  # C2 x H/4  x W/4
    f3: torch.Tensor  # C3 x H/8  x W/8
    x: torch.Tensor   # C  x H/16 x W/16, the hybrid feature


@dataclass
class DecoupledFeatures:
    attention: torch.Tensor
    x_id: torch.Tensor
    x_mask: torch.Tensor


@dataclass
class ModelOutput:
    encoder: EncoderOutput
    attention: torch.Tensor | None
    x_id: torch.Tensor
    x_mask: torch.Tensor
    z_id: torch.Tensor
    mask_logits: torch.Tensor


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)
        self.act = nn.SiLU()

    def forward(self, x):
        y = self.act(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return self.act(x + y)


class _DownStage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(out_ch),
            nn.SiLU(),
        )
        self.block = ResidualBlock(out_ch)

    def forward(self, x):
        return self.block(self.down(x))


class Encoder(nn.Module):
    """4-stage residual encoder; each stage halves the spatial size."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 3, padding=1, bias=False),
            nn.BatchNorm2d(c1),
            nn.SiLU(),
        )
        self.stage1 = _DownStage(c1, c1)
        self.stage2 = _DownStage(c1, c2)
        self.stage3 = _DownStage(c2, c3)
        self.stage4 = _DownStage(c3, c4)

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        s = self.cfg.image_size
        if images.shape[2] != s or images.shape[3] != s:
            raise ValueError(
                f"expected {s}x{s} input images, got {images.shape[2]}x{images.shape[3]}"
            )
        f1 = self.stage1(self.stem(images))
        f2 = self.stage2(f1)
        f3 = self.stage3(f2)
        x = self.stage4(f3)
        return EncoderOutput(f1=f1, f2=f2, f3=f3, x=x)


class MaskDecouplingModule(nn.Module):
    """Residual-attention split of the hybrid feature.

    A squeeze-excitation channel gate and a conv spatial gate (driven by
    channel-mean and channel-max maps) are each squashed by a sigmoid and
    merged by elementwise product, so the merged map factorizes and stays
    in (0, 1).
    """

    def __init__(self, channels: int, reduction: int = 8, spatial_kernel: int = 3,
                 gate_bias: float = 2.0):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.channel_fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.SiLU(),
            nn.Conv2d(hidden, channels, 1),
        )
        self.spatial_conv = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2)
        # start near pass-through (phi ~ sigmoid(b)^2) so the identity branch
        # is fed from step one; the mask branch pressure then carves phi down
        # where occlusions live instead of collapsing it globally
        nn.init.constant_(self.channel_fc[-1].bias, gate_bias)
        nn.init.constant_(self.spatial_conv.bias, gate_bias)

    def channel_attention(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.channel_fc(pooled))

    def spatial_attention(self, x: torch.Tensor) -> torch.Tensor:
        mean_map = x.mean(dim=1, keepdim=True)
        max_map = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.spatial_conv(torch.cat([mean_map, max_map], dim=1)))

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        phi = self.channel_attention(x) * self.spatial_attention(x)
        return phi.clamp(ATTENTION_EPS, 1.0 - ATTENTION_EPS)

    def forward(self, x: torch.Tensor) -> DecoupledFeatures:
        phi = self.attention_map(x)
        x_id, x_mask = decouple(x, phi)
        return DecoupledFeatures(attention=phi, x_id=x_id, x_mask=x_mask)


def decouple(x: torch.Tensor, phi: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """x_id = x * phi, x_mask = x * (1 - phi); their sum reproduces x."""
    if phi.shape[-3:] != x.shape[-3:]:
        raise ValueError(f"attention shape {tuple(phi.shape)} does not match {tuple(x.shape)}")
    return x * phi, x * (1.0 - phi)


class IdentityHead(nn.Module):
    """Flatten -> linear -> feature normalization; maps x_id to the embedding."""

    def __init__(self, in_features: int, embed_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_features, embed_dim)
        self.norm = nn.BatchNorm1d(embed_dim)

    def pre_norm(self, x_id: torch.Tensor) -> torch.Tensor:
        return self.fc(x_id.flatten(1))

    def forward(self, x_id: torch.Tensor) -> torch.Tensor:
        return self.norm(self.pre_norm(x_id))


class MaskHead(nn.Module):
    """Flatten -> linear -> activation -> linear over the pattern classes."""

    def __init__(self, in_features: int, hidden: int, num_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(1),
            nn.Linear(in_features, hidden),
            nn.SiLU(),
            nn.Linear(hidden, num_classes),
        )

    def forward(self, x_mask: torch.Tensor) -> torch.Tensor:
        return self.net(x_mask)


class RecognitionModel(nn.Module):
    """Encoder plus decoupling path and both heads.

    With ``mdm_on=False`` the attention module is replaced by a plain
    channel split of X (first half to the identity head, second half to
    the mask head); the forward interface is unchanged.
    """

    def __init__(self, cfg: ModelConfig, mdm_on: bool = True):
        super().__init__()
        self.cfg = cfg
        self.mdm_on = mdm_on
        self.encoder = Encoder(cfg)
        c = cfg.channels[3]
        s = cfg.feature_size
        if mdm_on:
            self.mdm = MaskDecouplingModule(c)
            id_ch, mask_ch = c, c
        else:
            self.mdm = None
            id_ch, mask_ch = c // 2, c - c // 2
        self.id_head = IdentityHead(id_ch * s * s, cfg.embed_dim)
        self.mask_head = MaskHead(mask_ch * s * s, cfg.mask_head_hidden, cfg.num_pattern_classes)

    def forward(self, images: torch.Tensor) -> ModelOutput:
        enc = self.encoder(images)
        if self.mdm is not None:
            dec = self.mdm(enc.x)
            attention, x_id, x_mask = dec.attention, dec.x_id, dec.x_mask
        else:
            half = enc.x.shape[1] // 2
            attention = None
            x_id, x_mask = enc.x[:, :half], enc.x[:, half:]
        z_id = self.id_head(x_id)
        mask_logits = self.mask_head(x_mask)
        return ModelOutput(encoder=enc, attention=attention, x_id=x_id,
                           x_mask=x_mask, z_id=z_id, mask_logits=mask_logits)

    @torch.no_grad()
    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images).z_id


class ArcClassifier(nn.Module):
    """Per-identity weight rows for the angular-margin loss."""

    def __init__(self, num_classes: int, embed_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, embed_dim))
        nn.init.xavier_uniform_(self.weight)

    def cosine_logits(self, embeddings: torch.Tensor) -> torch.Tensor:
        return F.normalize(embeddings, dim=1) @ F.normalize(self.weight, dim=1).t()
