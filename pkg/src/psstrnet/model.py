"""PSSTRNet: shared encoder, text segmentation branch with mask update,
text removal branch, and the progressive driver with adaptive fusion."""

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

ENCODER_KERNELS = (7, 5, 3, 3, 3)
ENCODER_STRIDES = (1, 2, 2, 1, 1)
_WIDTH_MULTIPLIERS = (1, 2, 4, 4, 4)


class InputContractError(ValueError):
    """Raised when tensors handed to the network violate shape rules."""


@dataclass
class PSSTRNetConfig:
    iterations: int = 3
    base_channels: int = 41  # ~4.82M parameters
    ce_dilations: Tuple[int, ...] = (1, 2, 3, 5)
    epsilon: float = 1e-8
    input_size: Tuple[int, int] = (256, 256)
    adaptive_fusion: bool = True

    def __post_init__(self):
        self.ce_dilations = tuple(int(d) for d in self.ce_dilations)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        d = self.ce_dilations
        if not d or any(b <= a for a, b in zip(d, d[1:])) or d[0] < 1:
            raise ValueError("ce_dilations must be non-empty, positive, strictly increasing")
        if any(s % 4 for s in self.input_size):
            raise ValueError("input_size must be divisible by 4")

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in _WIDTH_MULTIPLIERS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ce_dilations"] = list(self.ce_dilations)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PSSTRNetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class IterationState:
    index: int
    removed: torch.Tensor       # I_out^i, composited result of this iteration
    mask: torch.Tensor          # M^i, corrected mask
    mask_raw: torch.Tensor      # M_temp^i, TRPM output at full resolution
    mask_merged: torch.Tensor   # M_comp^i = max(M_temp^i, M^{i-1})
    removed_raw: Optional[torch.Tensor] = field(default=None, repr=False)  # I_temp

    @classmethod
    def initial(cls, i_in: torch.Tensor) -> "IterationState":
        zeros = i_in.new_zeros(i_in.shape[0], 1, *i_in.shape[2:])
        return cls(0, i_in, zeros, zeros, zeros, i_in)


class ForwardResult(NamedTuple):
    final: torch.Tensor
    fused_mask: torch.Tensor
    states: List[IterationState]


# --------------------------------------------------------------------------
# Elementwise pieces of the progressive loop

def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise InputContractError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def merge_masks(m_temp: torch.Tensor, m_prev: torch.Tensor) -> torch.Tensor:
    _check_same(m_temp, m_prev, "merge_masks")
    return torch.maximum(m_temp, m_prev)


def compose_region(i_in: torch.Tensor, i_temp: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Keep ``i_in`` outside the text mask and ``i_temp`` inside it."""
    _check_same(i_in, i_temp, "compose_region")
    if m.shape[0] != i_in.shape[0] or m.shape[1] != 1 or m.shape[2:] != i_in.shape[2:]:
        raise InputContractError(f"compose_region: mask shape {tuple(m.shape)} does not fit image {tuple(i_in.shape)}")
    return i_in * (1 - m) + i_temp * m


def adaptive_fuse(states: Sequence[IterationState], i_in: torch.Tensor,
                  epsilon: float = 1e-8) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mask-weighted average of all iteration outputs composited over ``i_in``.

    Returns the unclamped fused image and the mean mask.
    """
    if len(states) == 0:
        raise ValueError("adaptive_fuse needs at least one iteration state")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    n = len(states)
    mean_mask = sum(s.mask for s in states) / n
    weighted = sum(s.removed * s.mask for s in states) / n
    blended = (weighted + epsilon) / (mean_mask + epsilon)
    return i_in * (1 - mean_mask) + blended * mean_mask, mean_mask


def upsample_x4(m: torch.Tensor) -> torch.Tensor:
    # two x2 bilinear stages rather than one x4
    m = F.interpolate(m, scale_factor=2, mode="bilinear", align_corners=False)
    return F.interpolate(m, scale_factor=2, mode="bilinear", align_corners=False)


def downsample_x4(m: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(m, kernel_size=4, stride=4)


# --------------------------------------------------------------------------
# Building blocks

class ConvBNReLU(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1, dilation=1):
        super().__init__(
            nn.Conv2d(cin, cout, k, stride=stride, padding=dilation * (k // 2), dilation=dilation, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class ResidualBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(ch)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(x + y)


class Stage(nn.Module):
    """conv -> BN -> ReLU -> residual block."""

    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__()
        self.conv = ConvBNReLU(cin, cout, k, stride)
        self.res = ResidualBlock(cout)

    def forward(self, x):
        return self.res(self.conv(x))


class SharedEncoder(nn.Module):
    def __init__(self, widths: Sequence[int], in_ch: int = 7):
        super().__init__()
        stages = []
        cin = in_ch
        for cout, k, s in zip(widths, ENCODER_KERNELS, ENCODER_STRIDES):
            stages.append(Stage(cin, cout, k, s))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class ContextExploration(nn.Module):
    """Parallel dilated 3x3 convolutions, concatenated and fused by a 1x1 conv."""

    def __init__(self, ch, dilations=(1, 2, 3, 5)):
        super().__init__()
        branch_ch = max(ch // len(dilations), 1)
        self.branches = nn.ModuleList(ConvBNReLU(ch, branch_ch, 3, dilation=d) for d in dilations)
        self.fuse = ConvBNReLU(branch_ch * len(dilations), ch, 1)

    def forward(self, x):
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


class TextRegionPositioning(nn.Module):
    """Quarter-resolution text mask head on the encoder bottleneck."""

    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(ConvBNReLU(ch, ch), ConvBNReLU(ch, ch))
        self.head = nn.Conv2d(ch, 1, 1)

    def forward(self, x):
        z = self.body(x)
        return torch.sigmoid(self.head(z)), z


class MaskUpdate(nn.Module):
    """Merging block plus the distraction-mining correcting block."""

    def __init__(self, ch, dilations=(1, 2, 3, 5)):
        super().__init__()
        self.ce_fp = ContextExploration(ch, dilations)
        self.ce_fn = ContextExploration(ch, dilations)
        self.alpha = nn.Parameter(torch.ones(1))
        self.beta = nn.Parameter(torch.ones(1))
        self.nr_fp = nn.Sequential(nn.BatchNorm2d(ch), nn.ReLU(inplace=True))
        self.nr_fn = nn.Sequential(nn.BatchNorm2d(ch), nn.ReLU(inplace=True))
        self.proj = nn.Conv2d(ch, 1, 1)

    merge = staticmethod(merge_masks)

    def correct(self, m_comp: torch.Tensor, feat: torch.Tensor, z0: torch.Tensor) -> torch.Tensor:
        """Correct a full-resolution merged mask using bottleneck features.

        ``feat`` and ``z0`` live at quarter resolution; the corrected mask is
        brought back to full size with the same two bilinear steps as TRPM.
        """
        m = downsample_x4(m_comp)
        if m.shape[2:] != feat.shape[2:] or z0.shape != feat.shape:
            raise InputContractError(
                f"correct_mask: mask {tuple(m_comp.shape)} / features {tuple(feat.shape)} / z0 {tuple(z0.shape)} misaligned")
        fp = self.ce_fp(feat * m)
        fn = self.ce_fn(feat * (1 - m))
        z = self.nr_fp(z0 - self.alpha * fp)
        z = self.nr_fn(z + self.beta * fn)
        return upsample_x4(torch.sigmoid(self.proj(z)))


class RemovalDecoder(nn.Module):
    """U-Net style decoder mirroring the encoder, with skip connections."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        c1, c2, c3, c4, c5 = widths
        self.dec4 = Stage(c5 + c4, c3)
        self.dec3 = Stage(c3 + c3, c2)
        self.dec2 = Stage(c2 + c2, c1)
        self.dec1 = Stage(c1 + c1, c1)
        self.out = nn.Conv2d(c1, 3, 3, padding=1)

    def forward(self, feats):
        f1, f2, f3, f4, f5 = feats
        x = self.dec4(torch.cat([f5, f4], 1))
        x = self.dec3(torch.cat([x, f3], 1))
        x = F.interpolate(x, size=f2.shape[2:], mode="bilinear", align_corners=False)
        x = self.dec2(torch.cat([x, f2], 1))
        x = F.interpolate(x, size=f1.shape[2:], mode="bilinear", align_corners=False)
        x = self.dec1(torch.cat([x, f1], 1))
        return torch.sigmoid(self.out(x))


# --------------------------------------------------------------------------

class PSSTRNet(nn.Module):
    def __init__(self, cfg: Optional[PSSTRNetConfig] = None):
        super().__init__()
        self.cfg = cfg or PSSTRNetConfig()
        widths = self.cfg.widths
        self.encoder = SharedEncoder(widths)
        self.trpm = TextRegionPositioning(widths[-1])
        self.mum = MaskUpdate(widths[-1], self.cfg.ce_dilations)
        self.trb = RemovalDecoder(widths)

    # individual stages, exposed for testing and visualization
    def encode(self, stack: torch.Tensor) -> List[torch.Tensor]:
        if stack.dim() != 4 or stack.shape[1] != 7:
            raise InputContractError(f"encoder expects (B,7,H,W), got {tuple(stack.shape)}")
        if stack.shape[2] % 4 or stack.shape[3] % 4:
            raise InputContractError(f"H and W must be divisible by 4, got {tuple(stack.shape[2:])}")
        return self.encoder(stack)

    def locate_text(self, feats: List[torch.Tensor]):
        """Return (M_temp at full resolution, TRPM hidden feature)."""
        quarter, z0 = self.trpm(feats[-1])
        return upsample_x4(quarter), z0

    def segment_text(self, feats: List[torch.Tensor]) -> torch.Tensor:
        return self.locate_text(feats)[0]

    def correct_mask(self, m_comp, feats, z0):
        return self.mum.correct(m_comp, feats[-1], z0)

    def remove_text(self, feats: List[torch.Tensor]) -> torch.Tensor:
        return self.trb(feats)

    def run_iteration(self, prev: IterationState, i_in: torch.Tensor) -> IterationState:
        _check_same(prev.removed, i_in, "run_iteration")
        feats = self.encode(torch.cat([i_in, prev.removed, prev.mask], dim=1))
        m_temp, z0 = self.locate_text(feats)
        m_comp = merge_masks(m_temp, prev.mask)
        mask = self.correct_mask(m_comp, feats, z0)
        i_temp = self.remove_text(feats)
        removed = compose_region(i_in, i_temp, mask)
        return IterationState(prev.index + 1, removed, mask, m_temp, m_comp, i_temp)

    def forward(self, i_in: torch.Tensor, iterations: Optional[int] = None,
                adaptive_fusion: Optional[bool] = None) -> ForwardResult:
        if i_in.dim() != 4 or i_in.shape[1] != 3:
            raise InputContractError(f"expected (B,3,H,W) image batch, got {tuple(i_in.shape)}")
        n = self.cfg.iterations if iterations is None else int(iterations)
        if n < 1:
            raise ValueError("iterations must be >= 1")
        fuse = self.cfg.adaptive_fusion if adaptive_fusion is None else adaptive_fusion
        state = IterationState.initial(i_in)
        states = []
        for _ in range(n):
            state = self.run_iteration(state, i_in)
            states.append(state)
        if fuse:
            final, fused_mask = adaptive_fuse(states, i_in, self.cfg.epsilon)
            final = final.clamp(0.0, 1.0)
        else:
            final, fused_mask = states[-1].removed, states[-1].mask
        return ForwardResult(final, fused_mask, states)

    def named_parameter_set(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict(self.named_parameters())


def parameter_count(params) -> int:
    """Total element count of a name -> tensor mapping (or a module)."""
    if isinstance(params, nn.Module):
        params = dict(params.named_parameters())
    return sum(int(t.numel()) for t in params.values())
