"""Generator and discriminator networks.

The generator grows a learned 4x4 constant through strided up-convolutions,
with the latent vector injected at every stage through adaptive instance
normalization. A shared trunk feeds two heads: an RGB head bounded by tanh
and a disparity head whose magnitude is bounded by 10 times a per-instance
sigmoid gate. The discriminator is a strided convolutional classifier with
instance and spectral normalization on its inner layers.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.nn.utils import spectral_norm

__all__ = ["sample_latent", "AdaIN", "Generator", "Discriminator", "ema_update"]

LATENT_DIM = 128

# trunk layout per output resolution: (constant channels, up-stage channels)
_TRUNK = {
    32: (512, (256, 128, 64)),
    64: (1024, (512, 256, 128, 64)),
    128: (1024, (1024, 512, 256, 128, 64)),
}

_DISC_CHANNELS = (64, 128, 256, 512)


def sample_latent(
    n: int,
    latent_dim: int = LATENT_DIM,
    seed: int | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Draw ``n`` i.i.d. standard-normal latent vectors.

    Reproducible given ``seed`` or an explicit ``generator`` stream.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(seed)
    return torch.randn(n, latent_dim, generator=generator)


class AdaIN(nn.Module):
    """Adaptive instance normalization with a per-layer affine style map."""

    def __init__(self, channels: int, latent_dim: int = LATENT_DIM):
        super().__init__()
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.style = nn.Linear(latent_dim, 2 * channels)

    def forward(self, x: Tensor, z: Tensor) -> Tensor:
        scale, shift = self.style(z).chunk(2, dim=1)
        x = self.norm(x)
        return x * (1 + scale[:, :, None, None]) + shift[:, :, None, None]


class _SameConv4(nn.Module):
    """4x4 stride-1 convolution keeping spatial size (asymmetric zero pad)."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 4)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.pad(x, (1, 2, 1, 2)))


def _scaled(channels: int, width_mult: float) -> int:
    return max(8, int(round(channels * width_mult)))


class Generator(nn.Module):
    """Shared-trunk image/depth generator with style-based conditioning.

    Both heads consume the same trunk activations; only the final 4x4
    convolutions (and the scalar gate network of the depth head) differ.
    Image values lie in [-1, 1] and disparity magnitudes stay below
    ``depth_range``.
    """

    def __init__(
        self,
        image_size: int = 64,
        latent_dim: int = LATENT_DIM,
        width_mult: float = 1.0,
        depth_range: float = 10.0,
        scale_hidden: int = 128,
    ):
        super().__init__()
        if image_size not in _TRUNK:
            raise ValueError(f"unsupported image size {image_size}")
        self.image_size = image_size
        self.latent_dim = latent_dim
        self.depth_range = depth_range

        const_ch, stage_chs = _TRUNK[image_size]
        const_ch = _scaled(const_ch, width_mult)
        self.const = nn.Parameter(torch.randn(1, const_ch, 4, 4))
        self.input_style = AdaIN(const_ch, latent_dim)
        self.ups = nn.ModuleList()
        self.styles = nn.ModuleList()
        prev = const_ch
        for ch in stage_chs:
            ch = _scaled(ch, width_mult)
            self.ups.append(nn.ConvTranspose2d(prev, ch, 4, stride=2, padding=1))
            self.styles.append(AdaIN(ch, latent_dim))
            prev = ch
        self.image_head = _SameConv4(prev, 3)
        self.depth_head = _SameConv4(prev, 1)
        self.depth_scale = nn.Sequential(
            nn.Linear(latent_dim, scale_hidden),
            nn.ReLU(),
            nn.Linear(scale_hidden, 1),
        )

    def forward(self, z: Tensor) -> tuple[Tensor, Tensor]:
        h = self.const.expand(z.shape[0], -1, -1, -1)
        h = F.relu(self.input_style(h, z))
        for up, style in zip(self.ups, self.styles):
            h = F.relu(style(up(h), z))
        image = torch.tanh(self.image_head(h))
        gate = torch.sigmoid(self.depth_scale(z)).view(-1, 1, 1, 1)
        depth = torch.tanh(self.depth_head(h)) * self.depth_range * gate
        return image, depth

    def parameter_groups(self) -> dict[str, list[str]]:
        """Partition parameter names into trunk and head groups."""
        groups: dict[str, list[str]] = {
            "trunk": [],
            "image_head": [],
            "depth_head": [],
            "depth_scale": [],
        }
        for name, _ in self.named_parameters():
            head = name.split(".", 1)[0]
            groups[head if head in groups else "trunk"].append(name)
        return groups


class Discriminator(nn.Module):
    """Strided convolutional classifier emitting one logit per image.

    The first 5x5 stage is plain; the remaining three carry spectral
    normalization (one persisted power-iteration step per forward pass)
    and instance normalization.
    """

    def __init__(self, image_size: int = 64, width_mult: float = 1.0):
        super().__init__()
        if image_size % 16 != 0:
            raise ValueError(f"image size must be divisible by 16, got {image_size}")
        chs = [_scaled(c, width_mult) for c in _DISC_CHANNELS]
        layers: list[nn.Module] = [
            nn.Conv2d(3, chs[0], 5, stride=2, padding=2),
            nn.LeakyReLU(0.2),
        ]
        prev = chs[0]
        for ch in chs[1:]:
            layers += [
                spectral_norm(nn.Conv2d(prev, ch, 5, stride=2, padding=2)),
                nn.InstanceNorm2d(ch, affine=True),
                nn.LeakyReLU(0.2),
            ]
            prev = ch
        self.features = nn.Sequential(*layers)
        feat = image_size // 16
        self.logit = nn.Linear(prev * feat * feat, 1)

    def forward(self, images: Tensor) -> Tensor:
        return self.logit(self.features(images).flatten(1)).squeeze(1)


def _param_list(module_or_params) -> list[Tensor]:
    if isinstance(module_or_params, nn.Module):
        return list(module_or_params.parameters())
    return list(module_or_params)


@torch.no_grad()
def ema_update(average, live, decay: float = 0.999) -> None:
    """In-place exponential moving average: avg <- decay*avg + (1-decay)*live.

    Accepts modules or parameter iterables; the two parameter sets must be
    congruent in length and shapes.
    """
    avg_params = _param_list(average)
    live_params = _param_list(live)
    if len(avg_params) != len(live_params):
        raise ValueError(
            f"parameter count mismatch: {len(avg_params)} vs {len(live_params)}"
        )
    for a, p in zip(avg_params, live_params):
        if a.shape != p.shape:
            raise ValueError(f"parameter shape mismatch: {a.shape} vs {p.shape}")
        a.mul_(decay).add_(p, alpha=1.0 - decay)
