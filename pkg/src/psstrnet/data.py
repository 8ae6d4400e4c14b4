"""Paired image data: SCUT-style folders, mask derivation, augmentation, and a
synthetic toy-text generator that writes the same folder layout.

Layout::

    root/{train,test}/input/NAME.ext
    root/{train,test}/gt/NAME.ext
    root/{train,test}/mask/NAME.png      (optional; written by the generator)
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from . import glyphs
from .images import is_image_file, read_image, read_mask

log = logging.getLogger(__name__)

MASK_THRESHOLD = 25 / 255
MASK_DILATE_RADIUS = 3


@dataclass
class Sample:
    input: torch.Tensor     # (3, H, W)
    gt: torch.Tensor        # (3, H, W)
    mask_gt: torch.Tensor   # (1, H, W), binary
    name: str = ""


def derive_mask(input: torch.Tensor, gt: torch.Tensor, threshold: float = MASK_THRESHOLD,
                dilate_radius: int = MASK_DILATE_RADIUS) -> torch.Tensor:
    """Binary text mask from the input/label difference, dilated by a square.

    Accepts ``(3, H, W)`` or ``(N, 3, H, W)``; returns the matching mask shape.
    """
    if input.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(input.shape)} vs {tuple(gt.shape)}")
    batched = input.dim() == 4
    x, y = (input, gt) if batched else (input[None], gt[None])
    m = ((x - y).abs().amax(dim=1, keepdim=True) > threshold).float()
    if dilate_radius > 0:
        k = 2 * dilate_radius + 1
        m = F.max_pool2d(m, kernel_size=k, stride=1, padding=dilate_radius)
    return m if batched else m[0]


# --------------------------------------------------------------------------
# Loading

@dataclass
class FolderLayout:
    input_dir: str = "input"
    gt_dir: str = "gt"
    mask_dir: str = "mask"


def list_pairs(root, split: str, layout: FolderLayout = None) -> Tuple[List[Tuple[str, Path, Path, Optional[Path]]], List[Tuple[str, str]]]:
    """Name-matched (by stem) file triplets, lexicographically ordered."""
    layout = layout or FolderLayout()
    base = Path(root) / split
    errors = []
    idir, gdir, mdir = base / layout.input_dir, base / layout.gt_dir, base / layout.mask_dir
    if not idir.is_dir() or not gdir.is_dir():
        log.warning("no %s/%s pair folders under %s", layout.input_dir, layout.gt_dir, base)
        return [], errors

    def index(d):
        if not d.is_dir():
            return {}
        return {p.stem: p for p in sorted(d.iterdir()) if p.is_file() and is_image_file(p)}

    inputs, gts, masks = index(idir), index(gdir), index(mdir)
    for name in sorted(set(inputs) ^ set(gts)):
        errors.append((name, "missing input or gt counterpart"))
    pairs = [(n, inputs[n], gts[n], masks.get(n)) for n in sorted(set(inputs) & set(gts))]
    if not pairs:
        log.warning("no name-matched pairs under %s", base)
    return pairs, errors


def _load_sample(name, ipath, gpath, mpath, size, mask_source, threshold, radius) -> Sample:
    x = read_image(ipath, size)
    y = read_image(gpath, size)
    if x.shape != y.shape:
        raise ValueError(f"input {tuple(x.shape)} and gt {tuple(y.shape)} differ in size")
    if mask_source == "recorded" or (mask_source == "auto" and mpath is not None):
        if mpath is None:
            raise ValueError("no recorded mask")
        m = read_mask(mpath, tuple(x.shape[1:]))
    else:
        m = derive_mask(x, y, threshold, radius)
    return Sample(x, y, m, name)


def load_pairs(root, split: str = "train", input_size=(256, 256), layout: FolderLayout = None,
               mask_source: str = "auto", threshold: float = MASK_THRESHOLD,
               dilate_radius: int = MASK_DILATE_RADIUS, errors: list = None) -> Iterator[Sample]:
    """Stream Samples from ``root/split``.

    ``mask_source``: ``"derive"`` (input/gt subtraction), ``"recorded"`` (mask
    folder) or ``"auto"`` (recorded when present, derived otherwise). Files
    that fail to load are appended to ``errors`` and skipped.
    """
    if mask_source not in ("derive", "recorded", "auto"):
        raise ValueError(f"unknown mask_source {mask_source!r}")
    pairs, errs = list_pairs(root, split, layout)
    if errors is not None:
        errors.extend(errs)
    for name, ip, gp, mp in pairs:
        try:
            yield _load_sample(name, ip, gp, mp, input_size, mask_source, threshold, dilate_radius)
        except Exception as exc:
            log.warning("skipping %s: %s", name, exc)
            if errors is not None:
                errors.append((name, str(exc)))


class PairDataset(Dataset):
    """Indexable view over a split; samples load lazily unless ``cache``."""

    def __init__(self, root, split="train", input_size=(256, 256), layout: FolderLayout = None,
                 mask_source="auto", threshold=MASK_THRESHOLD, dilate_radius=MASK_DILATE_RADIUS,
                 cache=False):
        self.pairs, self.errors = list_pairs(root, split, layout)
        self.input_size = tuple(input_size) if input_size else None
        self.opts = (mask_source, threshold, dilate_radius)
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        s = _load_sample(*self.pairs[i], self.input_size, *self.opts)
        if self._cache is not None:
            self._cache[i] = s
        return s


def collate(samples: List[Sample]):
    return (torch.stack([s.input for s in samples]), torch.stack([s.gt for s in samples]),
            torch.stack([s.mask_gt for s in samples]), [s.name for s in samples])


# --------------------------------------------------------------------------
# Augmentation

def sample_seed(*keys: int) -> int:
    """Stable per-sample seed from (global seed, epoch, index, ...)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def hflip(s: Sample) -> Sample:
    return replace(s, input=s.input.flip(-1), gt=s.gt.flip(-1), mask_gt=s.mask_gt.flip(-1))


def augment(s: Sample, seed: int, flip: Optional[bool] = None, angle: Optional[float] = None,
            max_angle: float = 10.0) -> Sample:
    """Random horizontal flip (p=0.5) and small rotation, shared by all three tensors."""
    rng = np.random.default_rng(seed)
    drawn_flip = rng.random() < 0.5
    drawn_angle = float(rng.uniform(-max_angle, max_angle))
    flip = drawn_flip if flip is None else flip
    angle = drawn_angle if angle is None else float(angle)
    if flip:
        s = hflip(s)
    if angle != 0.0:
        rot = lambda t: TF.rotate(t, angle, interpolation=InterpolationMode.BILINEAR)
        s = replace(s, input=rot(s.input), gt=rot(s.gt), mask_gt=(rot(s.mask_gt) >= 0.5).float())
    return s


# --------------------------------------------------------------------------
# Synthetic toy text

@dataclass
class SynthConfig:
    count: int = 100
    image_size: Tuple[int, int] = (64, 64)
    strings: Tuple[int, int] = (1, 4)          # glyph strings per image
    chars: Tuple[int, int] = (1, 3)            # characters per string
    scale: Tuple[int, int] = (3, 4)            # integer glyph magnification
    bold_prob: float = 0.5                     # stroke-width proxy
    background: str = "mixed"                  # gradient | noise | stripes | mixed
    min_contrast: int = 40                     # 8-bit max-channel contrast vs background
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.strings = tuple(self.strings)
        self.chars = tuple(self.chars)
        self.scale = tuple(self.scale)
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.background not in ("gradient", "noise", "stripes", "mixed"):
            raise ValueError(f"unknown background family {self.background!r}")


def _background(rng: np.random.Generator, h: int, w: int, family: str) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((h, w, 3))
    img[:] = rng.uniform(0.3, 0.7, size=3)
    kinds = ("gradient", "noise", "stripes") if family == "mixed" else (family,)
    if "gradient" in kinds:
        theta = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h)
        img += ramp[..., None] * rng.uniform(-0.15, 0.15, size=3)
    if "noise" in kinds:
        grid = torch.from_numpy(rng.uniform(-0.1, 0.1, size=(1, 3, 4, 4)))
        smooth = F.interpolate(grid, size=(h, w), mode="bicubic", align_corners=True)[0]
        img += smooth.permute(1, 2, 0).numpy()
    if "stripes" in kinds:
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(6, 20)
        phase = np.cos(theta) * xx + np.sin(theta) * yy
        img += (0.05 * np.sin(2 * np.pi * phase / period))[..., None] * rng.uniform(-1, 1, size=3)
    return np.clip(np.round(np.clip(img, 0.15, 0.85) * 255), 0, 255).astype(np.uint8)


def _pick_color(rng, under: np.ndarray, min_contrast: int) -> np.ndarray:
    """Glyph colour whose max-channel difference to every covered pixel exceeds min_contrast."""
    under = under.astype(np.int64)
    for _ in range(20):
        c = rng.integers(0, 256, size=3)
        if (np.abs(under - c).max(axis=1) > min_contrast).all():
            return c.astype(np.uint8)
    # background lives in [0.15, 0.85]; the far extreme per channel always clears it
    mean = under.mean(axis=0)
    return np.where(mean > 127, 0, 255).astype(np.uint8)


def render_sample(rng: np.random.Generator, cfg: SynthConfig):
    """Return (input, gt, mask) as uint8 arrays (H,W,3), (H,W,3), (H,W)."""
    h, w = cfg.image_size
    gt = _background(rng, h, w, cfg.background)
    img = gt.copy()
    mask = np.zeros((h, w), dtype=bool)
    n_strings = int(rng.integers(cfg.strings[0], cfg.strings[1] + 1))
    for _ in range(n_strings):
        n_chars = int(rng.integers(cfg.chars[0], cfg.chars[1] + 1))
        text = "".join(rng.choice(list(glyphs.ALPHABET), size=n_chars))
        scale = int(rng.integers(cfg.scale[0], cfg.scale[1] + 1))
        bold = bool(rng.random() < cfg.bold_prob)
        bmp = glyphs.render_string(text, scale=scale, bold=bold)
        while (bmp.shape[0] > h or bmp.shape[1] > w) and len(text) > 1:
            text = text[:-1]
            bmp = glyphs.render_string(text, scale=scale, bold=bold)
        if bmp.shape[0] > h or bmp.shape[1] > w:
            continue
        top = int(rng.integers(0, h - bmp.shape[0] + 1))
        left = int(rng.integers(0, w - bmp.shape[1] + 1))
        region = np.zeros((h, w), dtype=bool)
        region[top:top + bmp.shape[0], left:left + bmp.shape[1]] = bmp
        color = _pick_color(rng, gt[region], cfg.min_contrast)
        img[region] = color
        mask |= region
    return img, gt, mask.astype(np.uint8) * 255


def synth_toy_dataset(cfg: SynthConfig, root) -> List[str]:
    """Write ``cfg.count`` input/gt/mask triplets under ``root/cfg.split``."""
    base = Path(root) / cfg.split
    for sub in ("input", "gt", "mask"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(cfg.count):
        rng = np.random.default_rng(sample_seed(cfg.seed, i))
        img, gt, mask = render_sample(rng, cfg)
        name = f"{cfg.split}_{i:05d}"
        Image.fromarray(img).save(base / "input" / f"{name}.png")
        Image.fromarray(gt).save(base / "gt" / f"{name}.png")
        Image.fromarray(mask).save(base / "mask" / f"{name}.png")
        names.append(name)
    return names
