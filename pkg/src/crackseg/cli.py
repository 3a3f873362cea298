"""Command-line front end: prepare, split, train, sweep, ablate, evaluate, predict.

Output locations default to $CRACKSEG_OUT (or ./runs) unless --out is given.
Exit code is 0 on success and 1 with a diagnostic on stderr for any error.
"""

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import train as train_mod
from .losses import LOSS_KINDS
from .metrics import format_table
from .predict import predict


def _out_root() -> Path:
    return Path(os.environ.get("CRACKSEG_OUT", "runs"))


def _parse_floats(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _load_train_config(args) -> train_mod.TrainConfig:
    if args.config:
        cfg = train_mod.TrainConfig.from_yaml(args.config)
    else:
        cfg = train_mod.TrainConfig()
    overrides = {}
    for flag, name in (
        ("lr", "learning_rate"),
        ("batch_size", "batch_size"),
        ("max_epochs", "max_epochs"),
        ("patience", "early_stop_patience"),
        ("threshold", "threshold"),
        ("seed", "seed"),
        ("device", "device"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[name] = value
    loss_fields = {}
    if getattr(args, "loss", None) is not None:
        loss_fields["kind"] = args.loss
    if getattr(args, "lam", None) is not None:
        loss_fields["lam"] = args.lam
    if loss_fields:
        overrides["loss"] = dataclasses.replace(cfg.loss, **loss_fields)
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML file mirroring the training config fields")
    p.add_argument("--lr", type=float, help="learning rate override")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int, help="early stopping patience override")
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--device", type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crackseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="refine one source dataset into tiles + manifest")
    p.add_argument("--images", required=True, help="directory of source images")
    p.add_argument("--masks", help="directory of masks (omit for non-crack sources)")
    p.add_argument("--source", required=True, help="dataset tag recorded per tile")
    p.add_argument("--out", help="output directory (default $CRACKSEG_OUT/dataset)")
    p.add_argument("--append", action="store_true", help="append to an existing manifest")
    p.add_argument("--invert", action="store_true", help="invert mask values first")
    p.add_argument("--morph-kernel", type=int, help="odd kernel for morphological closing")
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--augment-threshold", type=int, default=5000)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("split", help="assign train/val/test splits in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model on a split manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="run directory (default $CRACKSEG_OUT/train)")
    p.add_argument("--loss", choices=list(LOSS_KINDS))
    p.add_argument("--lambda", dest="lam", type=float, help="BCE weight of bce_dice")
    _add_train_flags(p)

    p = sub.add_parser("sweep", help="train/evaluate every loss configuration")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="default $CRACKSEG_OUT/sweep")
    p.add_argument(
        "--lambdas",
        default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
        help="bce_dice lambda values, comma separated",
    )
    _add_train_flags(p)

    p = sub.add_parser("ablate", help="fused vs CNN-only vs transformer-only")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="default $CRACKSEG_OUT/ablation")
    _add_train_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", help="default $CRACKSEG_OUT/evaluate")

    p = sub.add_parser("predict", help="export {0,255} mask PNGs for images")
    p.add_argument("images", nargs="+", help="input image paths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="default $CRACKSEG_OUT/predict")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlay", action="store_true", help="also write image|mask panels")
    p.add_argument("--device", default="cpu")

    return parser


def _cmd_prepare(args) -> int:
    out = Path(args.out) if args.out else _out_root() / "dataset"
    manifest_path = out / "manifest.jsonl"
    manifest = None
    if args.append:
        manifest = data_mod.Manifest.load(manifest_path)
    manifest = data_mod.prepare_source(
        args.images,
        args.masks,
        args.source,
        out,
        invert=args.invert,
        morph_kernel=args.morph_kernel,
        tile_size=args.tile,
        augment_threshold=args.augment_threshold,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        manifest=manifest,
    )
    manifest.save(manifest_path)
    proportion = data_mod.crack_proportion(manifest)
    print(
        f"{len(manifest)} tiles in {manifest_path} "
        f"(crack proportion {100 * proportion:.2f}%)"
    )
    return 0


def _cmd_split(args) -> int:
    manifest = data_mod.Manifest.load(args.manifest)
    ratios = _parse_floats(args.ratios)
    manifest = data_mod.split_manifest(manifest, ratios=ratios, seed=args.seed)
    manifest.save(args.manifest)
    counts = manifest.split_counts()
    print(
        f"split {len(manifest)} records -> "
        f"train {counts.get('train', 0)} / val {counts.get('val', 0)} / test {counts.get('test', 0)}"
    )
    return 0


def _cmd_train(args) -> int:
    manifest = data_mod.Manifest.load(args.manifest)
    cfg = _load_train_config(args)
    out = Path(args.out) if args.out else _out_root() / "train"
    record = train_mod.train(manifest, cfg, out)
    print(
        f"stopped: {record.stop_reason}; best epoch {record.best_epoch} "
        f"(val loss {record.best_val_loss:.6f}); checkpoint {record.checkpoint_path}"
    )
    return 0


def _cmd_sweep(args) -> int:
    manifest = data_mod.Manifest.load(args.manifest)
    cfg = _load_train_config(args)
    out = Path(args.out) if args.out else _out_root() / "sweep"
    train_mod.run_loss_sweep(manifest, cfg, lambdas=_parse_floats(args.lambdas), out_dir=out)
    return 0


def _cmd_ablate(args) -> int:
    manifest = data_mod.Manifest.load(args.manifest)
    cfg = _load_train_config(args)
    out = Path(args.out) if args.out else _out_root() / "ablation"
    train_mod.run_ablation(manifest, cfg, out_dir=out)
    return 0


def _cmd_evaluate(args) -> int:
    manifest = data_mod.Manifest.load(args.manifest)
    out = Path(args.out) if args.out else _out_root() / "evaluate"
    report = train_mod.evaluate(
        args.checkpoint,
        manifest,
        split=args.split,
        threshold=args.threshold,
        batch_size=args.batch_size,
        device=args.device,
        record_path=out / "records.jsonl",
    )
    print(format_table([(args.split, report)], label_header="split"))
    return 0


def _cmd_predict(args) -> int:
    out = Path(args.out) if args.out else _out_root() / "predict"
    written = predict(
        args.checkpoint,
        args.images,
        out,
        threshold=args.threshold,
        overlay=args.overlay,
        device=args.device,
    )
    for path in written:
        print(path)
    return 0


_COMMANDS = {
    "prepare": _cmd_prepare,
    "split": _cmd_split,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "evaluate": _cmd_evaluate,
    "predict": _cmd_predict,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
