"""Command-line entry points: synth, backbone, train, infer, eval, ablate."""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import torch.nn.functional as F
import yaml

from . import data, losses, metrics, train as trainmod
from .images import is_image_file, read_image, write_image
from .model import parameter_count

log = logging.getLogger("psstrnet")

PANEL_SEPARATOR = 2


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


# --------------------------------------------------------------------------
# synth / backbone

def cmd_synth(args) -> int:
    if args.count < 1:
        args.parser.error("--count must be >= 1")
    cfg = data.SynthConfig(count=args.count, image_size=tuple(args.size), seed=args.seed,
                           split=args.split, background=args.background)
    names = data.synth_toy_dataset(cfg, args.out)
    (Path(args.out) / args.split / "synth_config.json").write_text(
        json.dumps(_flags(args), indent=2, sort_keys=True))
    print(f"wrote {len(names)} samples to {Path(args.out) / args.split}")
    return 0


def cmd_backbone(args) -> int:
    if args.from_torchvision:
        losses.convert_torchvision_vgg16(args.from_torchvision, args.out)
    else:
        losses.write_random_vgg16(args.out, seed=args.random_seed)
    print(f"wrote backbone weights to {args.out}")
    return 0


# --------------------------------------------------------------------------
# train

_TRAIN_FLAGS = ("lr", "batch_size", "epochs", "iterations", "adaptive_fusion", "base_channels", "seed",
                "checkpoint_interval", "backbone", "mask_source", "augment", "input_size")


def _add_train_flags(p):
    p.add_argument("--data", required=True, help="dataset root with <split>/{input,gt}")
    p.add_argument("--config", help="YAML/JSON file of TrainConfig fields")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--adaptive-fusion", dest="adaptive_fusion", action="store_true", default=None)
    p.add_argument("--no-adaptive-fusion", dest="adaptive_fusion", action="store_false")
    p.add_argument("--base-channels", type=int)
    p.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int)
    p.add_argument("--backbone", help="perceptual backbone archive (see `psstrnet backbone`)")
    p.add_argument("--mask-source", choices=("auto", "derive", "recorded"))
    p.add_argument("--no-augment", dest="augment", action="store_false", default=None)


def _train_config(args) -> trainmod.TrainConfig:
    fields = {}
    if args.config:
        fields.update(yaml.safe_load(Path(args.config).read_text()) or {})
    for name in _TRAIN_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            fields[name] = val
    return trainmod.TrainConfig.from_dict(fields)


def _dataset(root, split, cfg: trainmod.TrainConfig):
    ds = data.PairDataset(root, split, input_size=cfg.input_size, mask_source=cfg.mask_source, cache=True)
    for name, e in ds.errors:
        _err(f"{name}: {e}")
    return ds


def cmd_train(args) -> int:
    if not (Path(args.data) / args.split).is_dir():
        _err(f"dataset split not found: {Path(args.data) / args.split}")
        return 2
    cfg = _train_config(args)
    try:
        backbone = losses.load_backbone(cfg.backbone)
    except losses.BackboneConfigError as exc:
        _err(str(exc))
        return 2
    ds = _dataset(args.data, args.split, cfg)
    if len(ds) == 0:
        _err("no training pairs found")
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "flags.json").write_text(json.dumps(_flags(args), indent=2, sort_keys=True))
    print(f"config: {cfg.iterations}It.{'+AF' if cfg.adaptive_fusion else ''}, {len(ds)} samples")
    res = trainmod.train(cfg, ds, out, backbone=backbone, resume=args.resume, echo=print)
    print(f"final checkpoint: {res.final_checkpoint}")
    return 1 if ds.errors else 0


# --------------------------------------------------------------------------
# infer

def _pad4(x):
    h, w = x.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


def _tile(t):
    return t.expand(3, -1, -1) if t.shape[0] == 1 else t


def panel_strip(i_in, states, final, fused_mask) -> torch.Tensor:
    """input | M_temp per iteration | output per iteration | final | fused mask."""
    tiles = [i_in] + [s.mask_raw[0] for s in states] + [s.removed[0] for s in states] + [final, fused_mask]
    tiles = [_tile(t) for t in tiles]
    h = tiles[0].shape[1]
    sep = torch.ones(3, h, PANEL_SEPARATOR)
    parts = []
    for k, t in enumerate(tiles):
        if k:
            parts.append(sep)
        parts.append(t)
    return torch.cat(parts, dim=2)


def _expand_inputs(paths):
    files = []
    for p in map(Path, paths):
        files.extend(sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p])
    return files


def cmd_infer(args) -> int:
    model, meta = trainmod.load_model(args.checkpoint)
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    written = 0
    for path in _expand_inputs(args.inputs):
        if not is_image_file(path):
            log.warning("skipping non-image file %s", path)
            print(f"warning: skipping non-image file {path}", file=sys.stderr)
            continue
        try:
            img = read_image(path)
        except Exception as exc:
            _err(f"{path}: {exc}")
            failures += 1
            continue
        x, (h, w) = _pad4(img[None])
        with torch.no_grad():
            r = model(x, iterations=args.iterations, adaptive_fusion=args.adaptive_fusion)
        crop = lambda t: t[..., :h, :w]
        final, mask = crop(r.final[0]), crop(r.fused_mask[0])
        write_image(out / f"{path.stem}.png", final)
        write_image(out / f"{path.stem}_mask.png", mask)
        if args.panels:
            for s in r.states:
                s.mask_raw, s.removed = crop(s.mask_raw), crop(s.removed)
            write_image(out / f"{path.stem}_panels.png", panel_strip(img, r.states, final, mask))
        written += 1
    print(f"wrote {written} result(s) to {out}")
    return 1 if failures else 0


# --------------------------------------------------------------------------
# eval / ablate

def _print_report(rep: metrics.MetricReport, title="aggregate"):
    print(title)
    for k in metrics.METRIC_NAMES:
        print(f"  {k:<6} {getattr(rep, k):.6f}")


def cmd_eval(args) -> int:
    flags = _flags(args)
    if args.pred:
        if not args.gt:
            args.parser.error("--pred needs --gt")
        rep = metrics.evaluate_dir(args.pred, args.gt)
        for name, e in rep.errors:
            _err(f"{name}: {e}")
        if args.out:
            rep.write(args.out, flags)
        _print_report(rep.aggregate)
        return 1 if rep.errors else 0
    if not (args.checkpoint and args.data):
        args.parser.error("give either --pred/--gt or --checkpoint/--data")
    model, meta = trainmod.load_model(args.checkpoint)
    ds = data.PairDataset(args.data, args.split, input_size=tuple(meta["model"]["input_size"]),
                          mask_source=args.mask_source)
    res = trainmod.evaluate(model, ds, iterations=args.iterations, adaptive_fusion=args.adaptive_fusion)
    rep = metrics.DirReport(res.aggregate, res.rows, list(ds.errors))
    for name, e in rep.errors:
        _err(f"{name}: {e}")
    if args.out:
        json_path, _ = rep.write(args.out, flags)
        payload = json.loads(json_path.read_text())
        payload["mask_iou"] = res.mask_iou
        json_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    _print_report(res.aggregate)
    if res.mask_iou is not None:
        print(f"  mask_iou {res.mask_iou:.6f}")
    return 1 if rep.errors else 0


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    try:
        labels = trainmod.select_configs(args.configs)
        backbone = losses.load_backbone(cfg.backbone)
    except (ValueError, losses.BackboneConfigError) as exc:
        _err(str(exc))
        return 2
    train_set = _dataset(args.data, args.split, cfg)
    test_set = _dataset(args.data, args.test_split, cfg)
    if len(train_set) == 0 or len(test_set) == 0:
        _err("ablation needs non-empty train and test splits")
        return 2
    rows = trainmod.run_ablation(cfg, train_set, test_set, args.out, [c[0] for c in labels],
                                 backbone=backbone, echo=print)
    table = trainmod.format_table(rows)
    print(table)
    out = Path(args.out)
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps({
        "flags": _flags(args),
        "rows": [{"label": r.label, "iterations": r.iterations, "adaptive_fusion": r.adaptive_fusion,
                  "mask_iou": r.mask_iou, "checkpoint": r.checkpoint, **r.report.to_dict()} for r in rows],
    }, indent=2, sort_keys=True))
    return 0


# --------------------------------------------------------------------------

def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "parser")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psstrnet", description="Progressive segmentation-guided scene text removal")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic toy text-removal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    p.add_argument("--background", default="mixed", choices=("gradient", "noise", "stripes", "mixed"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("backbone", help="write perceptual backbone weights in archive format")
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--random-seed", type=int, help="seeded untrained VGG-16")
    g.add_argument("--from-torchvision", help="torchvision vgg16 state dict (.pth)")
    p.set_defaults(func=cmd_backbone)

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="remove text from images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("inputs", nargs="+", help="image files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--panels", action="store_true", help="also write per-iteration panel strips")
    p.add_argument("--iterations", type=int)
    p.add_argument("--adaptive-fusion", dest="adaptive_fusion", action="store_true", default=None)
    p.add_argument("--no-adaptive-fusion", dest="adaptive_fusion", action="store_false")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Image-Eval metrics for prediction dirs or a checkpoint")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--mask-source", default="auto", choices=("auto", "derive", "recorded"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--adaptive-fusion", dest="adaptive_fusion", action="store_true", default=None)
    p.add_argument("--no-adaptive-fusion", dest="adaptive_fusion", action="store_false")
    p.add_argument("--out", help="directory for report.json / report.tsv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="iteration x fusion ablation matrix")
    _add_train_flags(p)
    p.add_argument("--split", default="train")
    p.add_argument("--test-split", default="test")
    p.add_argument("--configs", nargs="+", help="subset of row labels, e.g. 3It.+AF")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.parser = parser
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    trainmod.set_deterministic()
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
