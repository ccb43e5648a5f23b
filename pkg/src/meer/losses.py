"""Objective terms for both training stages.

Stage 1 combines mask-pattern cross-entropy with an additive-angular-margin
identity loss. Stage 2 adds the least-squares adversarial pair, a pixel
reconstruction term, an id-preserving cosine term on re-encoded fakes, and
an auxiliary identity loss on the fakes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

_COS_EPS = 1e-7


@dataclass
class LossWeights:
    """Balancing factors; defaults are the tuned operating point."""

    lam: float = 0.01       # identity term inside the stage-1 objective
    alpha: float = 1.0      # discriminator objective
    beta: float = 1.0       # identity terms in stage 2
    gamma: float = 10.0     # pixel reconstruction
    eta: float = 0.1        # id-preserving term
    arcface_scale: float = 64.0
    arcface_margin: float = 0.5

    def __post_init__(self):
        for name in ("lam", "alpha", "beta", "gamma", "eta", "arcface_scale", "arcface_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def arcface_loss(
    embeddings: torch.Tensor,
    class_weights: torch.Tensor,
    labels: torch.Tensor,
    scale: float = 64.0,
    margin: float = 0.5,
) -> torch.Tensor:
    """Additive angular margin softmax over L2-normalized features and weights.

    The true-class logit is s*cos(theta + m), all others s*cos(theta).
    With margin 0 and scale 1 this reduces to softmax cross-entropy over
    cosine similarities.
    """
    if embeddings.ndim != 2:
        raise ValueError(f"embeddings must be (B, d), got {tuple(embeddings.shape)}")
    num_classes = class_weights.shape[0]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels must be in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    emb = F.normalize(embeddings, dim=1)
    w = F.normalize(class_weights, dim=1)
    cosine = torch.clamp(emb @ w.t(), -1.0 + _COS_EPS, 1.0 - _COS_EPS)
    sine = torch.sqrt(torch.clamp(1.0 - cosine * cosine, min=0.0))
    phi = cosine * math.cos(margin) - sine * math.sin(margin)
    one_hot = F.one_hot(labels, num_classes).to(cosine.dtype)
    logits = scale * (one_hot * phi + (1.0 - one_hot) * cosine)
    return F.cross_entropy(logits, labels)


def mask_pattern_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy over the mask-pattern classes."""
    num_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"pattern labels must be in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels)


def stage1_loss(l_sm, l_arc, lam: float):
    """Multi-task stage-1 objective: l_sm + lam * l_arc."""
    return l_sm + lam * l_arc


def gan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares generator term: 1/2 * E[(D(fake) - 1)^2]."""
    return 0.5 * ((fake_scores - 1.0) ** 2).mean()


def gan_discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator term: real toward 1, fake toward 0."""
    return 0.5 * ((real_scores - 1.0) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()


def reconstruction_loss(fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel difference (mean over all elements)."""
    if fake.shape != real.shape:
        raise ValueError(f"shape mismatch: {tuple(fake.shape)} vs {tuple(real.shape)}")
    return ((fake - real) ** 2).mean()


def id_preserving_loss(z_fake: torch.Tensor, z_real: torch.Tensor) -> torch.Tensor:
    """1 - cosine(z_fake, z_real), the real embedding held as a constant target."""
    if z_fake.ndim == 1:
        z_fake = z_fake.unsqueeze(0)
        z_real = z_real.unsqueeze(0)
    z_real = z_real.detach()
    if (z_fake.norm(dim=1) == 0).any() or (z_real.norm(dim=1) == 0).any():
        raise ValueError("zero-norm embedding in id-preserving loss")
    cos = F.cosine_similarity(z_fake, z_real, dim=1)
    return (1.0 - cos).mean()


def stage2_generator_loss(l_d, l_id, l_id_prime, l_rec, l_idp, weights: LossWeights):
    """Joint generator/encoder objective for stage 2.

    The discriminator is optimized separately on alpha * its own term.
    """
    return l_d + weights.beta * (l_id + l_id_prime) + weights.gamma * l_rec + weights.eta * l_idp


def stage2_discriminator_loss(l_dadv, weights: LossWeights):
    return weights.alpha * l_dadv
