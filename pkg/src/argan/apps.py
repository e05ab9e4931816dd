"""Downstream uses of a trained model.

A trained checkpoint can synthesize (deep image, disparity, rendered image)
tuples from noise; those tuples supervise a u-net that either renders the
defocused image directly (direct renderer mode) or estimates disparity and
renders through the aperture pipeline (render-through mode, which also
returns the disparity estimate).
"""

from __future__ import annotations

import logging
from pathlib import Path

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from . import lfrender
from .models import sample_latent
from .trainer import load_generator_bundle

logger = logging.getLogger(__name__)

__all__ = [
    "UNet",
    "synthesize_tuples",
    "unet_learning_rate",
    "train_unet",
    "render_shallow_dof",
    "save_unet",
    "load_unet",
]

RENDER_MODES = ("argan_r", "argan_dr")


def _conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.LeakyReLU(0.2))


class UNet(nn.Module):
    """Encoder-decoder with skip connections for image-to-image regression.

    Six 48-channel encoder stages with 2x2 max pooling, five decoder stages
    that upsample and concatenate the matching encoder output (96 channels,
    the last stage narrowing 64 -> 32), and a linear 3x3 head. Output
    spatial size equals input size; inputs must be divisible by 32.
    """

    def __init__(self, out_channels: int = 1, in_channels: int = 3):
        super().__init__()
        self.out_channels = out_channels
        self.enc0 = _conv(in_channels, 48)
        self.enc1 = _conv(48, 48)
        self.enc2 = _conv(48, 48)
        self.enc3 = _conv(48, 48)
        self.enc4 = _conv(48, 48)
        self.enc5 = _conv(48, 48)
        self.enc6 = _conv(48, 48)
        self.pool = nn.MaxPool2d(2)
        self.dec5a = _conv(48 + 48, 96)
        self.dec5b = _conv(96, 96)
        self.dec4a = _conv(96 + 48, 96)
        self.dec4b = _conv(96, 96)
        self.dec3a = _conv(96 + 48, 96)
        self.dec3b = _conv(96, 96)
        self.dec2a = _conv(96 + 48, 96)
        self.dec2b = _conv(96, 96)
        self.dec1a = _conv(96 + in_channels, 64)
        self.dec1b = _conv(64, 32)
        self.dec1c = nn.Conv2d(32, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ValueError(f"input size must be divisible by 32, got {tuple(x.shape[-2:])}")
        p1 = self.pool(self.enc1(self.enc0(x)))
        p2 = self.pool(self.enc2(p1))
        p3 = self.pool(self.enc3(p2))
        p4 = self.pool(self.enc4(p3))
        p5 = self.pool(self.enc5(p4))
        h = self.enc6(p5)
        up = lambda t: F.interpolate(t, scale_factor=2, mode="nearest")
        h = self.dec5b(self.dec5a(torch.cat([up(h), p4], dim=1)))
        h = self.dec4b(self.dec4a(torch.cat([up(h), p3], dim=1)))
        h = self.dec3b(self.dec3a(torch.cat([up(h), p2], dim=1)))
        h = self.dec2b(self.dec2a(torch.cat([up(h), p1], dim=1)))
        h = self.dec1b(self.dec1a(torch.cat([up(h), x], dim=1)))
        return self.dec1c(h)


def synthesize_tuples(
    checkpoint, n: int, seed: int = 0, batch_size: int = 32
) -> dict[str, Tensor]:
    """Sample (deep image, disparity, full-strength render) tuples from the
    averaged generator of a checkpoint. Reproducible given ``seed``."""
    config, generator, expander, mask = load_generator_bundle(checkpoint)
    gen = torch.Generator().manual_seed(seed)
    deeps, depths, shallows = [], [], []
    with torch.no_grad():
        for start in range(0, n, batch_size):
            z = sample_latent(min(batch_size, n - start), config.latent_dim, generator=gen)
            deep, depth = generator(z)
            shallow = lfrender.render(deep, depth, 1.0, expander, mask)
            deeps.append(deep)
            depths.append(depth)
            shallows.append(shallow)
    return {
        "deep": torch.cat(deeps),
        "depth": torch.cat(depths),
        "shallow": torch.cat(shallows),
    }


def unet_learning_rate(base_lr: float, iteration: int, total: int, ramp_fraction: float = 0.3) -> float:
    """Constant learning rate with a linear ramp to zero over the final
    ``ramp_fraction`` of the run."""
    if total <= 0:
        return base_lr
    progress = iteration / total
    if progress < 1 - ramp_fraction:
        return base_lr
    return base_lr * (1 - progress) / ramp_fraction


def train_unet(
    inputs: Tensor,
    targets: Tensor,
    iterations: int,
    out_channels: int | None = None,
    batch_size: int = 4,
    lr: float = 3e-4,
    betas: tuple[float, float] = (0.9, 0.99),
    seed: int = 0,
    log_every: int = 100,
) -> tuple[UNet, list[dict[str, float]]]:
    """Fit a u-net to (input image -> target) pairs by mean absolute error.

    Returns the trained network and the loss history. Zero iterations
    return the freshly initialized network unchanged.
    """
    if inputs.shape[0] < 1 or inputs.shape[0] != targets.shape[0]:
        raise ValueError("need at least one input/target pair with matching counts")
    if out_channels is None:
        out_channels = targets.shape[1]
    torch.manual_seed(seed)
    net = UNet(out_channels=out_channels)
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=betas)
    rng = torch.Generator().manual_seed(seed + 1)
    history: list[dict[str, float]] = []
    for it in range(iterations):
        for group in opt.param_groups:
            group["lr"] = unet_learning_rate(lr, it, iterations)
        idx = torch.randint(0, inputs.shape[0], (min(batch_size, inputs.shape[0]),), generator=rng)
        loss = (net(inputs[idx]) - targets[idx]).abs().mean()
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite u-net loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it % log_every == 0 or it == iterations - 1:
            history.append({"iteration": it, "loss": loss.item()})
            logger.debug("unet iteration %d loss %.5f", it, loss.item())
    return net, history


def render_shallow_dof(
    image: Tensor,
    mode: str,
    unet: UNet,
    expander=None,
    mask=None,
) -> tuple[Tensor, Tensor | None]:
    """Defocus an image with a trained u-net.

    ``argan_r`` maps the image straight to the render; ``argan_dr``
    estimates disparity first and renders through the aperture pipeline
    (returning the disparity estimate as well).
    """
    if mode not in RENDER_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {RENDER_MODES}")
    with torch.no_grad():
        if mode == "argan_r":
            if unet.out_channels != 3:
                raise ValueError("direct rendering needs a 3-channel u-net")
            return unet(image), None
        if unet.out_channels != 1:
            raise ValueError("render-through mode needs a 1-channel u-net")
        depth = unet(image)
        shallow = lfrender.render(image, depth, 1.0, expander, mask)
    return shallow, depth


def save_unet(net: UNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"state_dict": net.state_dict(), "out_channels": net.out_channels}
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    return path


def load_unet(path) -> UNet:
    payload = torch.load(path, weights_only=False)
    net = UNet(out_channels=payload["out_channels"])
    net.load_state_dict(payload["state_dict"])
    net.requires_grad_(False)
    net.eval()
    return net
