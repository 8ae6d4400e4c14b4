"""Training losses: region content (L1), perceptual, style (Gram), dice.

All losses take per-iteration lists (``outs[i]`` is the composited output of
iteration ``i + 1``) and sum over iterations.
"""

import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
# relu1_1, relu2_1, relu3_1, relu4_1, relu5_1 in torchvision's vgg16().features
VGG16_TAPS = (1, 6, 11, 18, 25)
DICE_SMOOTH = 1e-6


class BackboneConfigError(RuntimeError):
    pass


@dataclass
class LossWeights:
    gamma1: float = 50.0          # text region
    gamma2: float = 10.0          # non-text region
    gamma_seg: Tuple[float, ...] = (1.0, 2.0, 3.0)
    w_style: float = 200.0
    w_perc: float = 0.1

    def __post_init__(self):
        self.gamma_seg = tuple(float(g) for g in self.gamma_seg)
        vals = (self.gamma1, self.gamma2, self.w_style, self.w_perc) + self.gamma_seg
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def for_iterations(cls, n: int, **kw) -> "LossWeights":
        return cls(gamma_seg=tuple(float(i) for i in range(1, n + 1)), **kw)


@dataclass
class LossBreakdown:
    rc: torch.Tensor
    perceptual: torch.Tensor
    style: torch.Tensor
    seg: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        keys = ("rc", "perceptual", "style", "seg", "total")
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in keys}


# --------------------------------------------------------------------------
# Frozen feature extractor

class PerceptualBackbone(nn.Module):
    """Frozen feature extractor returning activations at ``taps``.

    ``layers`` is run sequentially up to the deepest tap. Inputs in [0, 1]
    are normalized with ``mean``/``std`` first (pass ``None`` to skip).
    """

    def __init__(self, layers: nn.Sequential, taps: Sequence[int],
                 mean: Optional[Sequence[float]] = IMAGENET_MEAN,
                 std: Optional[Sequence[float]] = IMAGENET_STD):
        super().__init__()
        self.taps = tuple(int(t) for t in taps)
        self.layers = layers[: max(self.taps) + 1]
        if mean is not None:
            self.register_buffer("mean", torch.tensor(mean).view(1, -1, 1, 1))
            self.register_buffer("std", torch.tensor(std).view(1, -1, 1, 1))
        else:
            self.mean = self.std = None
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # weights and (absent) statistics stay frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        if self.mean is not None:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self.taps:
                feats.append(x)
        return feats


def _vgg16_layers() -> nn.Sequential:
    from torchvision.models import vgg16
    layers = vgg16(weights=None).features
    for m in layers:
        if isinstance(m, nn.ReLU):
            m.inplace = False
    return layers


def vgg16_backbone(state: Mapping[str, torch.Tensor], taps=VGG16_TAPS) -> PerceptualBackbone:
    layers = _vgg16_layers()
    wanted = {f"features.{k}": v for k, v in layers.state_dict().items()}
    missing = [k for k in wanted if k not in state]
    if missing:
        raise BackboneConfigError(f"backbone archive lacks {len(missing)} tensors, e.g. {missing[0]}")
    layers.load_state_dict({k[len("features."):]: state[k] for k in wanted})
    return PerceptualBackbone(layers, taps)


def load_backbone(path) -> PerceptualBackbone:
    if not path:
        raise BackboneConfigError("no perceptual backbone weights configured")
    if not os.path.exists(path):
        raise BackboneConfigError(f"backbone weights not found: {path}")
    tensors, meta = checkpoint.load(path)
    taps = meta.get("taps", VGG16_TAPS)
    return vgg16_backbone(tensors, taps)


def write_random_vgg16(path, seed: int = 0) -> None:
    """Seeded, untrained VGG-16 weights for environments without ImageNet weights."""
    g = torch.random.fork_rng(devices=[])
    with g:
        torch.manual_seed(seed)
        layers = _vgg16_layers()
    state = {f"features.{k}": v for k, v in layers.state_dict().items()}
    checkpoint.save(path, state, {"arch": "vgg16", "taps": list(VGG16_TAPS),
                                  "source": f"random-init seed={seed}"})


def convert_torchvision_vgg16(pth_path, path) -> None:
    """Convert a torchvision ``vgg16`` state dict (.pth) into the archive format."""
    sd = torch.load(pth_path, map_location="cpu", weights_only=True)
    state = {k: v.float() for k, v in sd.items() if k.startswith("features.")}
    if not state:
        raise BackboneConfigError(f"{pth_path} holds no 'features.*' tensors")
    checkpoint.save(path, state, {"arch": "vgg16", "taps": list(VGG16_TAPS),
                                  "source": os.path.basename(str(pth_path))})


# --------------------------------------------------------------------------
# Losses

def _check_list(outs, ref, what):
    if len(outs) == 0:
        raise ValueError(f"{what}: empty output list")
    for o in outs:
        if o.shape != ref.shape:
            raise ValueError(f"{what}: shape mismatch {tuple(o.shape)} vs {tuple(ref.shape)}")


def region_content_loss(outs: Sequence[torch.Tensor], gt: torch.Tensor, m_gt: torch.Tensor,
                        w: LossWeights = None) -> torch.Tensor:
    w = w or LossWeights()
    _check_list(outs, gt, "region_content_loss")
    if m_gt.shape[0] != gt.shape[0] or m_gt.shape[2:] != gt.shape[2:]:
        raise ValueError("region_content_loss: mask does not fit image")
    total = 0
    for o in outs:
        diff = o - gt
        total = total + w.gamma1 * (m_gt * diff).abs().mean() + w.gamma2 * ((1 - m_gt) * diff).abs().mean()
    return total


def gram(f: torch.Tensor) -> torch.Tensor:
    b, c, h, w = f.shape
    x = f.reshape(b, c, h * w)
    return torch.bmm(x, x.transpose(1, 2)) / (c * h * w)


def feature_losses(outs: Sequence[torch.Tensor], gt: torch.Tensor,
                   backbone: PerceptualBackbone) -> Tuple[torch.Tensor, torch.Tensor]:
    """(perceptual, style) from one batched pass of the backbone."""
    if backbone is None:
        raise BackboneConfigError("perceptual/style losses need a backbone")
    _check_list(outs, gt, "feature_losses")
    n = len(outs)
    feats = backbone(torch.cat([*outs, gt], dim=0))
    b = gt.shape[0]
    perc = 0
    style = 0
    for f in feats:
        f_gt = f[n * b:]
        g_gt = gram(f_gt)
        for i in range(n):
            f_o = f[i * b:(i + 1) * b]
            perc = perc + (f_o - f_gt).abs().mean()
            style = style + (gram(f_o) - g_gt).abs().mean()
    return perc, style


def perceptual_loss(outs, gt, backbone) -> torch.Tensor:
    return feature_losses(outs, gt, backbone)[0]


def style_loss(outs, gt, backbone) -> torch.Tensor:
    return feature_losses(outs, gt, backbone)[1]


def dice_segmentation_loss(masks: Sequence[torch.Tensor], m_gt: torch.Tensor,
                           w: LossWeights = None) -> torch.Tensor:
    w = w or LossWeights.for_iterations(len(masks))
    _check_list(masks, m_gt, "dice_segmentation_loss")
    if len(w.gamma_seg) != len(masks):
        raise ValueError(f"gamma_seg has {len(w.gamma_seg)} weights for {len(masks)} iterations")
    g = m_gt.flatten(1)
    total = 0
    for gamma, m in zip(w.gamma_seg, masks):
        m = m.flatten(1)
        inter = (m * g).sum(1)
        denom = (m * m).sum(1) + (g * g).sum(1)
        dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
        total = total + gamma * (1 - dice).mean()
    return total


def combine(rc, perceptual, style, seg, w: LossWeights = None) -> LossBreakdown:
    w = w or LossWeights()
    total = w.w_style * style + w.w_perc * perceptual + rc + seg
    return LossBreakdown(rc, perceptual, style, seg, total)


def total_loss(outs, masks, gt, m_gt, backbone, w: LossWeights = None) -> LossBreakdown:
    w = w or LossWeights.for_iterations(len(outs))
    rc = region_content_loss(outs, gt, m_gt, w)
    perc, style = feature_losses(outs, gt, backbone)
    seg = dice_segmentation_loss(masks, m_gt, w)
    return combine(rc, perc, style, seg, w)
