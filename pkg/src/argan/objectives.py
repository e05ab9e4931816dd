"""Training objectives and their stochastic components.

Covers the defocus-strength sampling policy, the non-saturating adversarial
losses, the center focus prior with its warm-up schedule, and the image
consistency terms used by the alternative training modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor
from torch.nn import functional as F

from .metrics import FeatureExtractor, feature_distance

__all__ = [
    "DoFScalePolicy",
    "sample_dof_scale",
    "CenterFocusPriorConfig",
    "focus_falloff",
    "center_focus_prior",
    "prior_loss",
    "discriminator_loss",
    "generator_loss",
    "l1_image_consistency",
    "perceptual_image_consistency",
    "ABLATION_MODES",
]

ABLATION_MODES = ("none", "l1", "perceptual", "double_disc")


@dataclass(frozen=True)
class DoFScalePolicy:
    """Distribution of the per-sample defocus strength s.

    ``binomial`` draws s in {0, 1} with P(s=1) = p_s; ``uniform`` draws
    s from U(0, 1).
    """

    kind: str = "binomial"
    p_s: float = 0.5

    def __post_init__(self):
        if self.kind not in ("binomial", "uniform"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "binomial" and not 0.0 <= self.p_s <= 1.0:
            raise ValueError(f"p_s must lie in [0, 1], got {self.p_s}")


def sample_dof_scale(
    policy: DoFScalePolicy,
    n: int,
    generator: torch.Generator | None = None,
    seed: int | None = None,
) -> Tensor:
    """Draw ``n`` defocus strengths from the policy, reproducibly."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(seed)
    u = torch.rand(n, generator=generator)
    if policy.kind == "binomial":
        return (u < policy.p_s).to(torch.float32)
    return u


@dataclass(frozen=True)
class CenterFocusPriorConfig:
    """Shape and schedule of the center focus prior.

    ``r_th`` is the focused radius (1.0 = half the image width), ``gain``
    the slope of the receding background, ``weight`` the loss multiplier,
    and ``warmup_iters`` the number of initial iterations the prior stays
    active.
    """

    r_th: float = 0.25
    gain: float = 1.0
    weight: float = 1.0
    warmup_iters: int = 0

    def __post_init__(self):
        if not 0.0 <= self.r_th <= 1.0:
            raise ValueError(f"r_th must lie in [0, 1], got {self.r_th}")
        if self.gain < 0:
            raise ValueError(f"gain must be non-negative, got {self.gain}")
        if self.weight < 0:
            raise ValueError(f"weight must be non-negative, got {self.weight}")


def focus_falloff(r: Tensor, r_th: float, gain: float) -> Tensor:
    """Disparity as a function of normalized center distance: zero inside
    the focused radius, then linearly receding behind the focal plane."""
    return torch.where(r <= r_th, torch.zeros_like(r), -gain * (r - r_th))


def center_focus_prior(
    height: int,
    width: int,
    config: CenterFocusPriorConfig = CenterFocusPriorConfig(),
    dtype: torch.dtype = torch.float32,
    device=None,
) -> Tensor:
    """Analytic disparity map encoding a centered in-focus subject.

    Distances are normalized so r = 1 at half the image width. Returns an
    (H, W) map; symmetric under flips, and under 90-degree rotations for
    square maps.
    """
    if height != width:
        raise ValueError(f"prior map expects square images, got {height}x{width}")
    ys = torch.arange(height, dtype=dtype, device=device) - (height - 1) / 2
    xs = torch.arange(width, dtype=dtype, device=device) - (width - 1) / 2
    r = torch.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2) / (width / 2)
    return focus_falloff(r, config.r_th, config.gain)


def prior_loss(
    depth: Tensor,
    prior_map: Tensor,
    weight: float,
    iteration: int,
    warmup_iters: int,
) -> Tensor:
    """Mean squared pull of generated disparity toward the prior map.

    Active only while ``iteration < warmup_iters``; afterwards the term is
    exactly zero and contributes no gradient.
    """
    if iteration >= warmup_iters or weight == 0:
        return torch.zeros((), device=depth.device, dtype=depth.dtype)
    return weight * (depth - prior_map).pow(2).mean()


def discriminator_loss(logits_real: Tensor, logits_fake: Tensor) -> Tensor:
    """Binary real/fake loss in logit form, averaged per batch."""
    return F.softplus(-logits_real).mean() + F.softplus(logits_fake).mean()


def generator_loss(logits_fake: Tensor) -> Tensor:
    """Non-saturating generator loss, averaged per batch."""
    return F.softplus(-logits_fake).mean()


def l1_image_consistency(deep: Tensor, shallow: Tensor, weight: float = 1.0) -> Tensor:
    """Mean absolute difference pulling the sharp branch toward the render."""
    if deep.shape != shallow.shape:
        raise ValueError(f"shape mismatch: {tuple(deep.shape)} vs {tuple(shallow.shape)}")
    return weight * (deep - shallow).abs().mean()


def perceptual_image_consistency(
    deep: Tensor, shallow: Tensor, extractor: FeatureExtractor, weight: float = 1.0
) -> Tensor:
    """Feature-space counterpart of the L1 consistency term."""
    return weight * feature_distance(deep, shallow, extractor)
