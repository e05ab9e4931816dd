"""Image, disparity, and grid file helpers.

Images travel as float tensors in [-1, 1] with shape (3, H, W); disparity
maps as float32 arrays saved in NPY format (the header records shape and
dtype, so the files are lossless and language-neutral).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def to_uint8(image: Tensor) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = ((image.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_image(image: Tensor, path) -> None:
    if image.dim() == 4:
        image = image[0]
    Image.fromarray(to_uint8(image)).save(path)


def load_image(path, image_size: int | None = None) -> Tensor:
    """Load an RGB image as (3, H, W) in [-1, 1]; optionally center-crop to
    square and resize. Pixel 255 maps to +1.0 and pixel 0 to -1.0."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if image_size is not None:
            side = min(img.size)
            left = (img.width - side) // 2
            top = (img.height - side) // 2
            img = img.crop((left, top, left + side, top + side))
            if side != image_size:
                img = img.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def save_disparity(depth: Tensor, path) -> None:
    """Save a single-channel disparity map as a float32 NPY file."""
    arr = depth.detach().cpu().numpy()
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected one single-channel map, got shape {arr.shape}")
    np.save(path, arr.astype(np.float32))


def load_disparity(path) -> Tensor:
    """Load a disparity map from NPY or from a single-channel float image."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("F"), dtype=np.float32)
    arr = np.squeeze(np.asarray(arr, dtype=np.float32))
    if arr.ndim != 2:
        raise ValueError(f"disparity file {path} is not a single-channel map")
    return torch.from_numpy(arr)


def colorize_depth(depth: Tensor, vmin: float | None = None, vmax: float | None = None) -> Tensor:
    """Map an (H, W) disparity map to a (3, H, W) image in [-1, 1]."""
    from matplotlib import cm

    d = depth.detach().cpu().numpy().astype(np.float64)
    lo = float(d.min()) if vmin is None else vmin
    hi = float(d.max()) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    rgba = cm.viridis((d - lo) / span)
    rgb = torch.from_numpy(rgba[..., :3]).permute(2, 0, 1).float()
    return rgb * 2 - 1


def save_image_grid(rows: list[list[Tensor]], path, pad: int = 2) -> None:
    """Tile (3, H, W) tensors into a grid PNG, row by row."""
    if not rows or not rows[0]:
        raise ValueError("empty grid")
    h, w = rows[0][0].shape[-2:]
    n_rows, n_cols = len(rows), len(rows[0])
    canvas = np.full(
        (n_rows * (h + pad) - pad, n_cols * (w + pad) - pad, 3), 255, dtype=np.uint8
    )
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            canvas[i * (h + pad) : i * (h + pad) + h, j * (w + pad) : j * (w + pad) + w] = (
                to_uint8(tile)
            )
    Image.fromarray(canvas).save(path)
