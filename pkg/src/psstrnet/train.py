"""Training, evaluation, and the iteration x fusion ablation matrix."""

import json
import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import checkpoint
from .data import PairDataset, Sample, augment, collate, sample_seed
from .losses import LossWeights, PerceptualBackbone, load_backbone, total_loss
from .metrics import MetricReport, evaluate_pair
from .model import PSSTRNet, PSSTRNetConfig, parameter_count

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "psstrnet-checkpoint"
DETERMINISTIC_ENV = "PSSTRNET_DETERMINISTIC"

# label, iterations, adaptive fusion
ABLATION_CONFIGS = (
    ("1It.", 1, False),
    ("2It.", 2, False),
    ("3It.", 3, False),
    ("4It.", 4, False),
    ("2It.+AF", 2, True),
    ("3It.+AF", 3, True),
    ("4It.+AF", 4, True),
)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 10
    batch_size: int = 6
    epochs: int = 100
    input_size: Tuple[int, int] = (256, 256)
    iterations: int = 3
    adaptive_fusion: bool = True
    base_channels: int = 41
    seed: int = 0
    checkpoint_interval: int = 10
    augment: bool = True
    mask_source: str = "auto"
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    gamma1: float = 50.0
    gamma2: float = 10.0
    w_style: float = 200.0
    w_perc: float = 0.1
    backbone: str = ""
    channels_last: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def model_config(self) -> PSSTRNetConfig:
        return PSSTRNetConfig(iterations=self.iterations, base_channels=self.base_channels,
                              input_size=self.input_size, adaptive_fusion=self.adaptive_fusion)

    def loss_weights(self) -> LossWeights:
        return LossWeights.for_iterations(self.iterations, gamma1=self.gamma1, gamma2=self.gamma2,
                                          w_style=self.w_style, w_perc=self.w_perc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay; ``epoch`` is 0-based."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def set_deterministic(flag: Optional[bool] = None) -> bool:
    if flag is None:
        flag = os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0", "false")
    torch.use_deterministic_algorithms(bool(flag))
    return bool(flag)


# --------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, model: PSSTRNet, optimizer: Optional[torch.optim.Optimizer] = None,
                    meta: Optional[dict] = None) -> None:
    tensors = OrderedDict((f"model.{k}", v) for k, v in model.state_dict().items())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for key, val in optimizer.state.get(p, {}).items():
                    tensors[f"optim.{names[id(p)]}.{key}"] = val
    config = {"format": CHECKPOINT_FORMAT, "model": model.cfg.to_dict()}
    config.update(meta or {})
    checkpoint.save(path, tensors, config)


def read_checkpoint(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise checkpoint.ArchiveError(f"{path} is not a model checkpoint")
    return tensors, meta


def _build_model(tensors, meta) -> PSSTRNet:
    model = PSSTRNet(PSSTRNetConfig.from_dict(meta["model"]))
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    return model


def load_model(path) -> Tuple[PSSTRNet, dict]:
    tensors, meta = read_checkpoint(path)
    return _build_model(tensors, meta), meta


def _restore_optimizer(optimizer, model: PSSTRNet, tensors: Dict[str, torch.Tensor]) -> None:
    for n, p in model.named_parameters():
        prefix = f"optim.{n}."
        st = {k[len(prefix):]: v.clone() for k, v in tensors.items() if k.startswith(prefix)}
        if st:
            optimizer.state[p] = st


# --------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    run_dir: Path
    final_checkpoint: Path
    log_path: Path
    steps: int
    param_count: int


def _write_log(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng(sample_seed(seed, epoch, 0x5EED)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _make_batch(dataset, idx, cfg: TrainConfig, epoch: int):
    samples = []
    for j in idx:
        s = dataset[int(j)]
        if cfg.augment:
            s = augment(s, sample_seed(cfg.seed, epoch, int(j)))
        samples.append(s)
    return collate(samples)


def train(cfg: TrainConfig, dataset, run_dir, backbone: Optional[PerceptualBackbone] = None,
          resume=None, echo: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train PSSTRNet on ``dataset`` (indexable of Samples); artifacts go to ``run_dir``.

    Writes ``config.json``, ``log.jsonl`` (one record per optimizer step plus
    epoch summaries), interval checkpoints and ``final.pstr``.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if backbone is None:
        backbone = load_backbone(cfg.backbone)
    weights = cfg.loss_weights()
    fmt = torch.channels_last if cfg.channels_last else torch.contiguous_format

    torch.manual_seed(cfg.seed)
    model = PSSTRNet(cfg.model_config())
    start_epoch, step = 0, 0
    saved = None
    if resume is not None:
        saved, saved_meta = read_checkpoint(resume)
        if PSSTRNetConfig.from_dict(saved_meta["model"]) != model.cfg:
            raise ValueError("resume checkpoint was trained with a different model config")
        model.load_state_dict(_build_model(saved, saved_meta).state_dict())
        start_epoch, step = int(saved_meta["epoch"]), int(saved_meta["global_step"])
    model = model.to(memory_format=fmt)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr_at(start_epoch, cfg),
                                 betas=cfg.betas, eps=cfg.adam_eps)
    if saved is not None:
        _restore_optimizer(optimizer, model, saved)

    n_params = parameter_count(model)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    log_path = run_dir / "log.jsonl"
    _write_log(log_path, {"type": "start", "param_count": n_params, "start_epoch": start_epoch,
                          "resume": str(resume) if resume else None, "config": cfg.to_dict()})
    if echo:
        echo(f"parameters: {n_params} ({n_params / 1e6:.2f}M)")

    def meta(epoch):
        return {"epoch": epoch, "global_step": step, "train": cfg.to_dict()}

    model.train()
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        t0 = time.time()
        sums = {}
        batches = _batches(len(dataset), cfg.batch_size, cfg.seed, epoch)
        for idx in batches:
            x, y, m, names = _make_batch(dataset, idx, cfg, epoch)
            x = x.contiguous(memory_format=fmt)
            result = model(x)
            outs = [s.removed for s in result.states]
            masks = [s.mask for s in result.states]
            losses = total_loss(outs, masks, y, m, backbone, weights)
            if not torch.isfinite(losses.total):
                dump = run_dir / "nonfinite_batch.pstr"
                checkpoint.save(dump, {"input": x.contiguous(), "gt": y, "mask_gt": m},
                                {"names": names, "epoch": epoch, "step": step, "losses": losses.as_floats()})
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch} step {step}; batch dumped to {dump}")
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            optimizer.step()
            step += 1
            vals = losses.as_floats()
            for k, v in vals.items():
                sums[k] = sums.get(k, 0.0) + v
            _write_log(log_path, {"type": "step", "epoch": epoch, "step": step, "lr": lr, **vals})
        summary = {k: v / len(batches) for k, v in sums.items()}
        _write_log(log_path, {"type": "epoch", "epoch": epoch, "steps": len(batches),
                              "seconds": round(time.time() - t0, 3), **summary})
        if echo:
            echo(f"epoch {epoch + 1}/{cfg.epochs} lr={lr:.2e} total={summary['total']:.4f} "
                 f"({time.time() - t0:.1f}s)")
        if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(run_dir / f"ckpt_epoch{epoch + 1:04d}.pstr", model, optimizer, meta(epoch + 1))

    final = run_dir / "final.pstr"
    save_checkpoint(final, model, optimizer, meta(max(cfg.epochs, start_epoch)))
    return TrainResult(run_dir, final, log_path, step, n_params)


def read_log(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# Evaluation

@dataclass
class EvalResult:
    aggregate: MetricReport
    rows: List[Tuple[str, MetricReport]]
    mask_iou: Optional[float] = None


def mask_iou(pred: torch.Tensor, target: torch.Tensor, threshold: float = 0.5) -> float:
    p = pred >= threshold
    t = target >= 0.5
    union = (p | t).sum().item()
    if union == 0:
        return 1.0
    return (p & t).sum().item() / union


def evaluate_predictor(predict: Callable[[torch.Tensor], Tuple[torch.Tensor, Optional[torch.Tensor]]],
                       dataset, batch_size: int = 8) -> EvalResult:
    """Score ``predict(inputs) -> (images, masks or None)`` against the dataset's gt."""
    rows, ious = [], []
    n = len(dataset)
    for lo in range(0, n, batch_size):
        x, y, m, names = collate([dataset[i] for i in range(lo, min(lo + batch_size, n))])
        pred, pmask = predict(x)
        for k, name in enumerate(names):
            rows.append((name, evaluate_pair(pred[k], y[k])))
            if pmask is not None:
                ious.append(mask_iou(pmask[k], m[k]))
    if not rows:
        raise ValueError("evaluation dataset is empty")
    return EvalResult(MetricReport.mean([r for _, r in rows]), rows,
                      float(np.mean(ious)) if ious else None)


def model_predictor(model: PSSTRNet, iterations: Optional[int] = None,
                    adaptive_fusion: Optional[bool] = None):
    model.eval()

    @torch.no_grad()
    def predict(x):
        r = model(x, iterations=iterations, adaptive_fusion=adaptive_fusion)
        return r.final, r.fused_mask

    return predict


def evaluate(ckpt, dataset, iterations: Optional[int] = None, adaptive_fusion: Optional[bool] = None,
             batch_size: int = 8) -> EvalResult:
    """Evaluate a checkpoint path (or a model) with the given iteration/fusion setting."""
    model = ckpt if isinstance(ckpt, PSSTRNet) else load_model(ckpt)[0]
    return evaluate_predictor(model_predictor(model, iterations, adaptive_fusion), dataset, batch_size)


# --------------------------------------------------------------------------
# Ablation

@dataclass
class AblationRow:
    label: str
    iterations: int
    adaptive_fusion: bool
    report: MetricReport
    mask_iou: Optional[float]
    checkpoint: str


def select_configs(labels: Optional[Sequence[str]] = None):
    if not labels:
        return list(ABLATION_CONFIGS)
    known = {c[0]: c for c in ABLATION_CONFIGS}
    unknown = [l for l in labels if l not in known]
    if unknown:
        raise ValueError(f"unknown ablation configs {unknown}; choose from {list(known)}")
    return [c for c in ABLATION_CONFIGS if c[0] in labels]


def run_ablation(cfg: TrainConfig, train_set, test_set, run_root, labels=None,
                 backbone: Optional[PerceptualBackbone] = None, echo=None) -> List[AblationRow]:
    """Train once per distinct iteration count and evaluate with and without fusion.

    Fusion only changes how the final output is assembled; the training
    objective covers the per-iteration outputs, so ``nIt.`` and ``nIt.+AF``
    share one trained model.
    """
    configs = select_configs(labels)
    backbone = backbone or load_backbone(cfg.backbone)
    run_root = Path(run_root)
    trained = {}
    rows = []
    for label, n, fuse in configs:
        if n not in trained:
            sub = TrainConfig.from_dict({**cfg.to_dict(), "iterations": n})
            if echo:
                echo(f"training {n}-iteration model")
            trained[n] = train(sub, train_set, run_root / f"it{n}", backbone=backbone, echo=echo).final_checkpoint
        res = evaluate(trained[n], test_set, iterations=n, adaptive_fusion=fuse)
        rows.append(AblationRow(label, n, fuse, res.aggregate, res.mask_iou, str(trained[n])))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    head = f"{'Config':<10}{'PSNR':>9}{'MSSIM':>9}{'MSE':>10}{'AGE':>9}{'pEPs':>9}{'pCEPs':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        p = r.report
        lines.append(f"{r.label:<10}{p.psnr:>9.2f}{p.mssim:>9.2f}{p.mse:>10.4f}{p.age:>9.4f}"
                     f"{p.peps:>9.4f}{p.pceps:>9.4f}")
    return "\n".join(lines)
