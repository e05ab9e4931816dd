"""Evaluation metrics for generated images and disparity maps.

Distribution distance is measured with a block-structured unbiased squared
maximum mean discrepancy under a cubic polynomial kernel in a feature
space; image similarity with an LPIPS-style normalized feature distance and
SSIM; depth quality with a scale/shift-invariant error, the pooled standard
deviation of generated disparities, and their pixel-wise average map.

No pretrained embedding is shipped: the default feature extractor is a
frozen, seeded, randomly initialized convolutional stack, and any module
with the same interface (for instance a pretrained network) can be passed
in its place.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

__all__ = [
    "FeatureExtractor",
    "feature_distance",
    "KidResult",
    "kid",
    "side",
    "ssim",
    "dsd",
    "ad",
    "MetricEntry",
    "MetricReport",
]


class FeatureExtractor(nn.Module):
    """Frozen convolutional feature stack with seeded random weights.

    Four stride-2 convolutions with leaky rectification; ``forward`` returns
    the globally pooled top-layer features, ``layer_features`` the full list
    of intermediate maps. Identified by (name, seed, dim); deterministic and
    never trained by this module.
    """

    def __init__(self, seed: int = 0, dim: int = 256, name: str = "randconv"):
        super().__init__()
        self.seed = seed
        self.dim = dim
        self.name = name
        channels = [3, 32, 64, 128, dim]
        gen = torch.Generator().manual_seed(seed)
        convs = []
        for cin, cout in zip(channels[:-1], channels[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = cin * 9
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5
                )
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        self.requires_grad_(False)
        self.eval()

    @property
    def identity(self) -> str:
        return f"{self.name}-seed{self.seed}-dim{self.dim}"

    def layer_features(self, images: Tensor) -> list[Tensor]:
        feats = []
        h = images
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats

    def forward(self, images: Tensor) -> Tensor:
        return self.layer_features(images)[-1].mean(dim=(2, 3))


def feature_distance(
    images_a: Tensor, images_b: Tensor, extractor: FeatureExtractor, eps: float = 1e-8
) -> Tensor:
    """LPIPS-style distance between two image batches.

    Per layer, feature maps are unit-normalized across channels at every
    position; the squared differences are averaged over positions and
    layers. Symmetric, zero iff the features coincide, and differentiable
    with respect to both inputs.
    """
    if images_a.shape != images_b.shape:
        raise ValueError(
            f"shape mismatch: {tuple(images_a.shape)} vs {tuple(images_b.shape)}"
        )
    feats_a = extractor.layer_features(images_a)
    feats_b = extractor.layer_features(images_b)
    total = images_a.new_zeros(())
    for fa, fb in zip(feats_a, feats_b):
        na = fa / (fa.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)
        nb = fb / (fb.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)
        total = total + (na - nb).pow(2).mean()
    return total / len(feats_a)


def _polynomial_kernel(a: Tensor, b: Tensor) -> Tensor:
    d = a.shape[1]
    return (a @ b.t() / d + 1.0) ** 3


def _mmd2_unbiased(x: Tensor, y: Tensor) -> Tensor:
    # all three kernel sums exclude their diagonal, so identical sample
    # blocks cancel to exactly zero
    m = x.shape[0]

    def offdiag(k: Tensor) -> Tensor:
        return k.sum() - k.diagonal().sum()

    kxx = _polynomial_kernel(x, x)
    kyy = _polynomial_kernel(y, y)
    kxy = _polynomial_kernel(x, y)
    return (offdiag(kxx) + offdiag(kyy) - 2.0 * offdiag(kxy)) / (m * (m - 1))


@dataclass(frozen=True)
class KidResult:
    estimate: float
    std: float
    n_blocks: int
    block_size: int


def kid(features_real, features_fake, block_size: int = 1000) -> KidResult:
    """Unbiased squared MMD under the kernel (a.b/d + 1)^3.

    Both feature sets are split in order into equal-size blocks (at most
    ``block_size`` samples each); the result is the mean and standard
    deviation of the per-block estimates.
    """
    xr = torch.as_tensor(features_real, dtype=torch.float64)
    xf = torch.as_tensor(features_fake, dtype=torch.float64)
    if xr.dim() != 2 or xf.dim() != 2:
        raise ValueError("feature sets must be 2-d (n, dim) arrays")
    if xr.shape[1] != xf.shape[1]:
        raise ValueError(f"feature dims disagree: {xr.shape[1]} vs {xf.shape[1]}")
    if xr.shape[0] < 2 or xf.shape[0] < 2:
        raise ValueError("need at least two samples per set")
    m = min(block_size, xr.shape[0], xf.shape[0])
    n_blocks = min(xr.shape[0] // m, xf.shape[0] // m)
    estimates = [
        _mmd2_unbiased(xr[i * m : (i + 1) * m], xf[i * m : (i + 1) * m]).item()
        for i in range(n_blocks)
    ]
    estimate = float(np.mean(estimates))
    std = float(np.std(estimates, ddof=1)) if n_blocks > 1 else 0.0
    return KidResult(estimate=estimate, std=std, n_blocks=n_blocks, block_size=m)


def _flatten_depths(depths) -> Tensor:
    t = torch.as_tensor(depths, dtype=torch.float64)
    if t.dim() == 4 and t.shape[1] == 1:
        t = t[:, 0]
    if t.dim() != 3:
        raise ValueError(f"expected (B, H, W) or (B, 1, H, W) depths, got {tuple(t.shape)}")
    return t


def side(depth_pred, depth_ref) -> float:
    """Scale/shift-invariant disparity error.

    Each predicted map is aligned to the reference by the positive scale
    minimizing the centered squared error, and the per-image score is the
    standard deviation of the residual (which cancels any additive shift).
    Exactly zero for predictions that are positive affine transforms of the
    reference. Raises if the reference has no variance.
    """
    pred = _flatten_depths(depth_pred).flatten(1)
    ref = _flatten_depths(depth_ref).flatten(1)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(ref.shape)}")
    ref_c = ref - ref.mean(dim=1, keepdim=True)
    pred_c = pred - pred.mean(dim=1, keepdim=True)
    ref_var = ref_c.pow(2).mean(dim=1)
    if bool((ref_var <= 1e-12).any()):
        raise ValueError("reference disparity has zero variance; alignment undefined")
    pred_var = pred_c.pow(2).mean(dim=1)
    cov = (pred_c * ref_c).mean(dim=1)
    scale = torch.where(pred_var > 1e-12, cov / pred_var.clamp(min=1e-12), torch.zeros_like(cov))
    scale = scale.clamp(min=0.0)
    err = scale[:, None] * pred - ref
    err_c = err - err.mean(dim=1, keepdim=True)
    return float(err_c.pow(2).mean(dim=1).sqrt().mean())


def ssim(images_a: Tensor, images_b: Tensor) -> float:
    """Mean SSIM over a batch, 11x11 Gaussian window with sigma 1.5.

    Inputs in [-1, 1] are mapped to [0, 1] internally.
    """
    from skimage.metrics import structural_similarity

    if images_a.shape != images_b.shape:
        raise ValueError(
            f"shape mismatch: {tuple(images_a.shape)} vs {tuple(images_b.shape)}"
        )
    a = ((images_a.detach().clamp(-1, 1) + 1) / 2).cpu().numpy()
    b = ((images_b.detach().clamp(-1, 1) + 1) / 2).cpu().numpy()
    values = [
        structural_similarity(
            np.moveaxis(ai, 0, -1),
            np.moveaxis(bi, 0, -1),
            channel_axis=-1,
            data_range=1.0,
            gaussian_weights=True,
            sigma=1.5,
            win_size=11,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
        for ai, bi in zip(a, b)
    ]
    return float(np.mean(values))


def dsd(depths) -> float:
    """Pooled standard deviation over all pixels of all disparity maps.

    Collapses to zero exactly when every map is the same constant.
    """
    t = _flatten_depths(depths)
    if t.shape[0] < 2:
        raise ValueError("need at least two maps")
    return float(t.reshape(-1).std(unbiased=False))


def ad(depths) -> Tensor:
    """Pixel-wise average disparity map across the batch."""
    t = _flatten_depths(depths)
    if t.shape[0] < 1:
        raise ValueError("empty batch")
    return t.mean(dim=0)


@dataclass
class MetricEntry:
    name: str
    value: float
    std: float | None = None
    count: int | None = None
    extractor: str | None = None


@dataclass
class MetricReport:
    """Named scalar results plus the extractor identity each one used."""

    entries: list[MetricEntry] = field(default_factory=list)

    def add(self, name, value, std=None, count=None, extractor=None) -> None:
        self.entries.append(
            MetricEntry(name=name, value=float(value), std=std, count=count, extractor=extractor)
        )

    def get(self, name: str) -> MetricEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries]}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["name", "value", "std", "count", "extractor"]
            )
            writer.writeheader()
            for entry in self.entries:
                writer.writerow(asdict(entry))

    @classmethod
    def from_json(cls, path) -> "MetricReport":
        data = json.loads(Path(path).read_text())
        report = cls()
        for item in data["entries"]:
            report.entries.append(MetricEntry(**item))
        return report
