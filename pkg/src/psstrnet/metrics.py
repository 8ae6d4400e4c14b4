"""Image-Eval metrics: PSNR, MSE, MSSIM, AGE, pEPs, pCEPS.

Inputs follow the ImageTensor layout, ``(3, H, W)`` or ``(N, 3, H, W)`` with
values in [0, 1], as numpy arrays or torch tensors. Batched inputs report the
mean of the per-image values.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .images import is_image_file, read_image

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
GRAY_WEIGHTS = (0.299, 0.587, 0.114)
ERROR_THRESHOLD = 20
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

METRIC_NAMES = ("psnr", "mssim", "mse", "age", "peps", "pceps")


@dataclass
class MetricReport:
    psnr: float
    mse: float
    mssim: float
    age: float
    peps: float
    pceps: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, reports: List["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("cannot average an empty list of reports")
        return cls(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES})


def _as_batch(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected (3,H,W) or (N,3,H,W), got {arr.shape}")
    return arr


def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def gray(x: np.ndarray) -> np.ndarray:
    """(N,3,H,W) -> (N,H,W) luma with BT.601 weights."""
    r, g, b = GRAY_WEIGHTS
    return r * x[:, 0] + g * x[:, 1] + b * x[:, 2]


def gray255(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * gray(x)), 0, 255).astype(np.int64)


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    per = np.mean((a - b) ** 2, axis=(1, 2, 3))
    # scalar log10 per image; a vectorized log may differ in the last ulp
    vals = [PSNR_CAP if m == 0 else 10.0 * math.log10(1.0 / float(m)) for m in per]
    return float(np.mean(vals))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim_gray(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """SSIM of two 2-D arrays, averaged over all valid window positions."""
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def mssim(a, b) -> float:
    a, b = _pair(a, b)
    ga, gb = gray(a), gray(b)
    return 100.0 * float(np.mean([ssim_gray(x, y) for x, y in zip(ga, gb)]))


def _gray_diff(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    return np.abs(gray255(a) - gray255(b))


def age(a, b) -> float:
    return float(np.mean(_gray_diff(a, b)))


def error_pixels(a, b, threshold: int = ERROR_THRESHOLD) -> np.ndarray:
    return _gray_diff(a, b) > threshold


def peps(a, b) -> float:
    return float(np.mean(error_pixels(a, b)))


def pceps(a, b) -> float:
    err = error_pixels(a, b)
    # out-of-image neighbours count as errors so border pixels only need
    # their existing neighbours to be errors
    p = np.pad(err, ((0, 0), (1, 1), (1, 1)), constant_values=True)
    clustered = err & p[:, :-2, 1:-1] & p[:, 2:, 1:-1] & p[:, 1:-1, :-2] & p[:, 1:-1, 2:]
    return float(np.mean(clustered))


def evaluate_pair(pred, gt) -> MetricReport:
    return MetricReport(psnr=psnr(pred, gt), mse=mse(pred, gt), mssim=mssim(pred, gt),
                        age=age(pred, gt), peps=peps(pred, gt), pceps=pceps(pred, gt))


# --------------------------------------------------------------------------
# Directory evaluation

@dataclass
class DirReport:
    aggregate: MetricReport
    rows: List[Tuple[str, MetricReport]]
    errors: List[Tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "aggregate": self.aggregate.to_dict(),
            "count": len(self.rows),
            "images": [{"name": n, **r.to_dict()} for n, r in self.rows],
            "errors": [{"name": n, "error": e} for n, e in self.errors],
        }

    def write(self, out_dir, flags: Optional[dict] = None) -> Tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = self.to_dict()
        if flags is not None:
            payload["flags"] = flags
        json_path = out / "report.json"
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        tsv_path = out / "report.tsv"
        with open(tsv_path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(("name",) + METRIC_NAMES)
            for name, r in self.rows:
                w.writerow((name,) + tuple(repr(getattr(r, k)) for k in METRIC_NAMES))
            w.writerow(("MEAN",) + tuple(repr(getattr(self.aggregate, k)) for k in METRIC_NAMES))
            for name, err in self.errors:
                w.writerow((f"# error {name}", err))
        return json_path, tsv_path


def _index(directory: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.is_file() and is_image_file(p)}


def evaluate_dir(pred_dir, gt_dir) -> DirReport:
    """Evaluate name-matched (by file stem) images of two directories."""
    preds, gts = _index(Path(pred_dir)), _index(Path(gt_dir))
    errors = [(n, "no ground truth counterpart") for n in sorted(set(preds) - set(gts))]
    errors += [(n, "no prediction counterpart") for n in sorted(set(gts) - set(preds))]
    common = sorted(set(preds) & set(gts))
    if not common:
        raise ValueError(f"no name-matched images between {pred_dir} and {gt_dir}")
    rows = []
    for name in common:
        try:
            p, g = read_image(preds[name]), read_image(gts[name])
            rows.append((name, evaluate_pair(p, g)))
        except Exception as exc:  # unreadable or size-mismatched pair
            log.warning("skipping %s: %s", name, exc)
            errors.append((name, str(exc)))
    if not rows:
        raise ValueError("every matched pair failed to evaluate")
    return DirReport(MetricReport.mean([r for _, r in rows]), rows, errors)
