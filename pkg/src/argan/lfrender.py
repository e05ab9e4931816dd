"""Differentiable light-field aperture rendering.

A shallow depth-of-field image is synthesized from an all-in-focus image and
a signed disparity map: the disparity field is expanded into one map per
aperture view, the image is warped into every view, and the views are
averaged under a normalized disk aperture. Disparity is measured in pixels
of displacement per unit angular offset; the focal plane sits at disparity 0.

All warps are inverse (gather) warps with clamp-to-edge bilinear sampling,
so rendered views are hole-free and the whole pipeline is differentiable
with respect to both the image and the disparity field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

__all__ = [
    "ApertureMask",
    "build_aperture_mask",
    "bilinear_gather",
    "self_warp_depth",
    "DepthExpansion",
    "expand_depth",
    "warp_lightfield",
    "integrate_aperture",
    "render",
    "depth_consistency_loss",
]


@dataclass(frozen=True)
class ApertureMask:
    """Normalized disk indicator over a K x K grid of angular offsets.

    Weights and offsets are kept in float64 (the disk normalization is then
    exact to machine precision) and cast to the working dtype at use.
    """

    size: int
    weights: Tensor  # (K*K,) non-negative, sums to 1
    offsets: Tensor  # (K*K, 2) integer-valued (dy, dx)

    @property
    def n_views(self) -> int:
        return self.size * self.size


def build_aperture_mask(size: int = 5) -> ApertureMask:
    """Build the disk aperture over a ``size`` x ``size`` view grid.

    A view at integer offset u carries positive weight iff |u| <= (size-1)/2;
    weights are normalized to sum to 1 so integration preserves the mean
    intensity of the source image. Deterministic for a given ``size``.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"aperture size must be a positive odd integer, got {size}")
    radius = (size - 1) // 2
    axis = torch.arange(size, dtype=torch.float64) - radius
    dy, dx = torch.meshgrid(axis, axis, indexing="ij")
    offsets = torch.stack([dy.reshape(-1), dx.reshape(-1)], dim=1)
    inside = offsets.pow(2).sum(dim=1) <= float(radius * radius)
    weights = inside.to(torch.float64)
    weights = weights / weights.sum()
    return ApertureMask(size=size, weights=weights, offsets=offsets)


def _base_grid(height: int, width: int, device, dtype) -> tuple[Tensor, Tensor]:
    ys = torch.arange(height, device=device, dtype=dtype).view(1, 1, height, 1)
    xs = torch.arange(width, device=device, dtype=dtype).view(1, 1, 1, width)
    return ys, xs


def bilinear_gather(source: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample ``source`` (B, C, H, W) at per-view pixel coordinates.

    ``ys`` and ``xs`` have shape (B, V, H, W) in pixel units; coordinates
    outside the image are clamped to the border. Returns (B, V, C, H, W).
    Integer coordinates reproduce source pixels exactly.
    """
    batch, channels, height, width = source.shape
    views = ys.shape[1]
    ys = ys.clamp(0.0, float(height - 1))
    xs = xs.clamp(0.0, float(width - 1))
    y0 = ys.floor()
    x0 = xs.floor()
    y1 = (y0 + 1).clamp(max=float(height - 1))
    x1 = (x0 + 1).clamp(max=float(width - 1))
    wy = (ys - y0).unsqueeze(2)
    wx = (xs - x0).unsqueeze(2)

    flat = source.reshape(batch, channels, height * width)

    def gather(yi: Tensor, xi: Tensor) -> Tensor:
        idx = (yi * width + xi).long().reshape(batch, 1, -1).expand(-1, channels, -1)
        out = flat.gather(2, idx)
        return out.reshape(batch, channels, views, height, width).transpose(1, 2)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    return (
        v00 * (1 - wy) * (1 - wx)
        + v01 * (1 - wy) * wx
        + v10 * wy * (1 - wx)
        + v11 * wy * wx
    )


def self_warp_depth(depth: Tensor, mask: ApertureMask) -> Tensor:
    """Resample a disparity map into every aperture view through itself.

    The view at angular offset u holds the disparity sampled at x + u * D(x),
    so pixels on the focal plane (D = 0) are reproduced exactly in every
    view. Returns a (B, K*K, H, W) stack.
    """
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise ValueError(f"expected depth of shape (B, 1, H, W), got {tuple(depth.shape)}")
    _, _, height, width = depth.shape
    offs = mask.offsets.to(device=depth.device, dtype=depth.dtype)
    base_y, base_x = _base_grid(height, width, depth.device, depth.dtype)
    ys = base_y + offs[:, 0].view(1, -1, 1, 1) * depth
    xs = base_x + offs[:, 1].view(1, -1, 1, 1) * depth
    return bilinear_gather(depth, ys, xs)[:, :, 0]


class DepthExpansion(nn.Module):
    """Residual refiner for the per-view disparity stack.

    Three 3x3 convolutions over the K*K view channels, each followed by
    instance normalization and leaky rectification, added back onto the
    input stack. The final convolution starts at zero, so a freshly built
    network is an exact identity.
    """

    def __init__(self, n_views: int = 25):
        super().__init__()
        self.n_views = n_views
        layers: list[nn.Module] = []
        for _ in range(3):
            layers += [
                nn.Conv2d(n_views, n_views, 3, padding=1),
                nn.InstanceNorm2d(n_views, affine=True),
                nn.LeakyReLU(0.2),
            ]
        self.body = nn.Sequential(*layers)
        final = self.body[6]
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)

    def forward(self, stack: Tensor) -> Tensor:
        if stack.shape[1] != self.n_views:
            raise ValueError(
                f"stack has {stack.shape[1]} views, network expects {self.n_views}"
            )
        return stack + self.body(stack)


def expand_depth(stack: Tensor, network: DepthExpansion | None = None) -> Tensor:
    """Refine a warped disparity stack; ``network=None`` is the identity."""
    if network is None:
        return stack
    return network(stack)


def warp_lightfield(image: Tensor, expanded: Tensor, mask: ApertureMask) -> Tensor:
    """Warp an image into every aperture view.

    The view at angular offset u samples the source at x + u * M(x, u) with
    clamp-to-edge bilinear interpolation. Returns (B, K*K, C, H, W); values
    stay within the per-image range of the source.
    """
    if image.shape[-2:] != expanded.shape[-2:]:
        raise ValueError(
            f"spatial shapes disagree: image {tuple(image.shape)} vs stack {tuple(expanded.shape)}"
        )
    if expanded.shape[1] != mask.n_views:
        raise ValueError(f"stack has {expanded.shape[1]} views, mask has {mask.n_views}")
    _, _, height, width = image.shape
    offs = mask.offsets.to(device=image.device, dtype=image.dtype)
    base_y, base_x = _base_grid(height, width, image.device, image.dtype)
    ys = base_y + offs[:, 0].view(1, -1, 1, 1) * expanded
    xs = base_x + offs[:, 1].view(1, -1, 1, 1) * expanded
    return bilinear_gather(image, ys, xs)


def integrate_aperture(lightfield: Tensor, mask: ApertureMask) -> Tensor:
    """Average the aperture views under the disk weights. Linear in the
    light field; with all views equal it returns the common view."""
    if lightfield.shape[1] != mask.n_views:
        raise ValueError(
            f"light field has {lightfield.shape[1]} views, mask has {mask.n_views}"
        )
    w = mask.weights.to(device=lightfield.device, dtype=lightfield.dtype)
    return (lightfield * w.view(1, -1, 1, 1, 1)).sum(dim=1)


def render(
    image: Tensor,
    depth: Tensor,
    s: float | Tensor = 1.0,
    expander: DepthExpansion | None = None,
    mask: ApertureMask | None = None,
    return_parts: bool = False,
):
    """Render a shallow depth-of-field image from an image and disparity map.

    ``s`` scales the disparity before rendering; it may be a float or a
    per-image (B,) tensor. With an identity expander, s = 0 or a zero
    disparity map reproduce the input image exactly.

    When ``return_parts`` is set, also returns the refined stack M and the
    raw self-warped stack (the inputs of the stack-consistency penalty).
    """
    if mask is None:
        size = 5 if expander is None else int(round(math.sqrt(expander.n_views)))
        mask = build_aperture_mask(size)
    if expander is not None and expander.n_views != mask.n_views:
        raise ValueError(
            f"expander views ({expander.n_views}) disagree with mask ({mask.n_views})"
        )
    if isinstance(s, Tensor):
        scaled = depth * s.to(device=depth.device, dtype=depth.dtype).view(-1, 1, 1, 1)
    else:
        scaled = depth * s
    warped = self_warp_depth(scaled, mask)
    expanded = expand_depth(warped, expander)
    lightfield = warp_lightfield(image, expanded, mask)
    out = integrate_aperture(lightfield, mask)
    if return_parts:
        return out, expanded, warped
    return out


def depth_consistency_loss(expanded: Tensor, warped: Tensor, weight: float = 1.0) -> Tensor:
    """Mean absolute deviation of the refined stack from the raw self-warped
    stack, scaled by ``weight``. Keeps the expansion network close to plain
    resampling."""
    if expanded.shape != warped.shape:
        raise ValueError(
            f"shape mismatch: {tuple(expanded.shape)} vs {tuple(warped.shape)}"
        )
    if weight == 0:
        return torch.zeros((), device=expanded.device, dtype=expanded.dtype)
    return weight * (expanded - warped).abs().mean()
