"""8-bit raster I/O and tensor conversion."""

from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp")


def is_image_file(path) -> bool:
    return Path(path).suffix.lower() in IMAGE_EXTS


def read_image(path, size=None) -> torch.Tensor:
    """RGB file -> float tensor (3, H, W) in [0, 1]. ``size`` is (H, W)."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def read_mask(path, size=None) -> torch.Tensor:
    """Grayscale file -> binary float tensor (1, H, W)."""
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.NEAREST)
        arr = np.asarray(im, dtype=np.uint8)
    return torch.from_numpy((arr >= 128).astype(np.float32))[None]


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) float in [0, 1] -> (H, W, C) or (H, W) uint8."""
    arr = x.detach().cpu().clamp(0, 1).mul(255).round().to(torch.uint8).numpy()
    if arr.shape[0] == 1:
        return arr[0]
    return arr.transpose(1, 2, 0)


def write_image(path, x: torch.Tensor) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path)
