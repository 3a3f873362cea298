"""Training loop, loss-sweep and ablation drivers, and split evaluation."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import torch
import yaml
from torch.utils.data import DataLoader, Dataset

from .data import Manifest, load_tile
from .losses import LossSpec, build_loss
from .metrics import (
    ConfusionCounts,
    MetricReport,
    aggregate_report,
    confusion_counts,
    format_table,
    write_records,
)
from .model import DualPathNet, ModelConfig, load_checkpoint, save_checkpoint


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 300
    early_stop_patience: int = 10
    min_delta: float = 1e-6
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    threshold: float = 0.5
    seed: int = 0
    device: str = "cpu"
    loss: LossSpec = field(default_factory=LossSpec)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = self.loss.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss" in d and not isinstance(d["loss"], LossSpec):
            d["loss"] = LossSpec.from_dict(d["loss"])
        if "model" in d and not isinstance(d["model"], ModelConfig):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data)


class EarlyStopping:
    """Stop after `patience` consecutive epochs without a strict improvement.

    An epoch improves when its value drops more than `min_delta` below the
    best seen so far.
    """

    def __init__(self, patience: int = 10, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.epoch = 0
        self.wait = 0

    def update(self, value: float) -> bool:
        self.epoch += 1
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = self.epoch
            self.wait = 0
            return True
        self.wait += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.wait >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    metrics: MetricReport

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "lr": self.lr,
            "metrics": self.metrics.to_dict(),
        }


@dataclass
class RunRecord:
    epochs: List[EpochRecord]
    best_epoch: int
    best_val_loss: float
    checkpoint_path: str
    stop_reason: str

    def to_dict(self) -> dict:
        return {
            "epochs": [e.to_dict() for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "checkpoint_path": self.checkpoint_path,
            "stop_reason": self.stop_reason,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")
        return path


class TileDataset(Dataset):
    """Tiles of one manifest split as ([0,1] CHW image, {0,1} 1HW mask) tensors."""

    def __init__(self, manifest: Manifest, split: str, input_size: int):
        self.records = manifest.split_records(split)
        if not self.records:
            raise ValueError(f"manifest split {split!r} is empty")
        self.root = manifest.root
        self.input_size = input_size

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int):
        image, mask = load_tile(self.records[index], self.root)
        if image.shape[1:] != (self.input_size, self.input_size):
            raise ValueError(
                f"tile {self.records[index].tile_path} is {image.shape[1:]}, "
                f"model expects {self.input_size}x{self.input_size}"
            )
        return torch.from_numpy(image), torch.from_numpy(mask)


def validate_model(model, loader, loss_fn, threshold: float = 0.5):
    """Deterministic pass over a loader; returns (mean loss, micro MetricReport)."""
    model.eval()
    device = next(model.parameters()).device
    total_loss = 0.0
    n_samples = 0
    counts: List[ConfusionCounts] = []
    with torch.no_grad():
        for images, masks in loader:
            images = images.to(device)
            masks = masks.to(device)
            pred = model(images)
            loss = loss_fn(pred, masks)
            total_loss += float(loss) * images.shape[0]
            n_samples += images.shape[0]
            counts.append(confusion_counts(pred, masks, threshold))
    report = aggregate_report(counts, n_images=n_samples, threshold=threshold)
    return total_loss / n_samples, report


def train(manifest: Manifest, cfg: TrainConfig, out_dir, label: str = "train") -> RunRecord:
    """Adam over shuffled train batches with plateau LR decay and early stopping.

    The checkpoint of the best validation epoch is kept at
    out_dir/<label>_best.pt; a JSON run record sits next to it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)

    train_set = TileDataset(manifest, "train", cfg.model.input_size)
    val_set = TileDataset(manifest, "val", cfg.model.input_size)
    generator = torch.Generator().manual_seed(cfg.seed)
    # full batches only (when possible) so batch-norm statistics stay sane on
    # configurations whose deepest maps are 1x1
    train_loader = DataLoader(
        train_set,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=generator,
        drop_last=len(train_set) > cfg.batch_size,
    )
    val_loader = DataLoader(val_set, batch_size=cfg.batch_size)

    model = DualPathNet(cfg.model).to(cfg.device)
    loss_fn = build_loss(cfg.loss)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience
    )
    stopper = EarlyStopping(cfg.early_stop_patience, cfg.min_delta)
    checkpoint_path = out_dir / f"{label}_best.pt"

    epochs: List[EpochRecord] = []
    stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        running = 0.0
        seen = 0
        for images, masks in train_loader:
            images = images.to(cfg.device)
            masks = masks.to(cfg.device)
            optimizer.zero_grad()
            loss = loss_fn(model(images), masks)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss {float(loss.detach())} at epoch {epoch} ({label})"
                )
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * images.shape[0]
            seen += images.shape[0]
        train_loss = running / seen

        val_loss, report = validate_model(model, val_loader, loss_fn, cfg.threshold)
        lr = optimizer.param_groups[0]["lr"]
        epochs.append(EpochRecord(epoch, train_loss, val_loss, lr, report))
        print(
            f"[{label}] epoch {epoch}: train {train_loss:.4f} val {val_loss:.4f} "
            f"f1 {report.f1:.3f} lr {lr:.2e}"
        )

        if stopper.update(val_loss):
            save_checkpoint(
                checkpoint_path,
                model,
                epoch=epoch,
                best_val_loss=val_loss,
                extra={"label": label, "train_config": cfg.to_dict()},
            )
        scheduler.step(val_loss)
        if stopper.should_stop:
            stop_reason = "early_stop"
            break

    record = RunRecord(
        epochs=epochs,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        checkpoint_path=str(checkpoint_path),
        stop_reason=stop_reason,
    )
    record.save(out_dir / f"{label}_run.json")
    return record


def evaluate(
    checkpoint_path,
    manifest: Manifest,
    split: str = "test",
    threshold: float = 0.5,
    batch_size: int = 16,
    device: str = "cpu",
    record_path=None,
) -> MetricReport:
    """Deterministic inference over one split, micro-aggregated into a report."""
    model, _ = load_checkpoint(checkpoint_path, map_location=device)
    model.to(device).eval()
    dataset = TileDataset(manifest, split, model.cfg.input_size)
    loader = DataLoader(dataset, batch_size=batch_size)
    counts = []
    with torch.no_grad():
        for images, masks in loader:
            pred = model(images.to(device))
            counts.append(confusion_counts(pred, masks.to(device), threshold))
    report = aggregate_report(counts, n_images=len(dataset), threshold=threshold)
    if record_path is not None:
        write_records(
            record_path,
            [(split, report)],
            checkpoint=str(checkpoint_path),
            split=split,
        )
    return report


def sweep_loss_specs(
    lambdas: Sequence[float],
    base: LossSpec,
    singles: Sequence[str] = ("dice", "bce", "recall_ce"),
) -> List[Tuple[str, LossSpec]]:
    """Row plan for the loss sweep: dice, bce_dice per lambda, bce, recall_ce.

    `singles` restricts which standalone losses appear; the bce_dice rows are
    controlled solely by `lambdas`.
    """
    unknown = set(singles) - {"dice", "bce", "recall_ce"}
    if unknown:
        raise ValueError(f"unknown single losses {sorted(unknown)}")
    rows = []
    if "dice" in singles:
        rows.append(("dice", dataclasses.replace(base, kind="dice")))
    for lam in lambdas:
        rows.append((f"bce_dice({lam:g})", dataclasses.replace(base, kind="bce_dice", lam=lam)))
    if "bce" in singles:
        rows.append(("bce", dataclasses.replace(base, kind="bce")))
    if "recall_ce" in singles:
        rows.append(("recall_ce", dataclasses.replace(base, kind="recall_ce")))
    if not rows:
        raise ValueError("loss sweep needs at least one row")
    return rows


def _train_and_score(manifest, cfg, out_dir, label) -> MetricReport:
    record = train(manifest, cfg, out_dir, label=label)
    return evaluate(
        record.checkpoint_path,
        manifest,
        split="test",
        threshold=cfg.threshold,
        batch_size=cfg.batch_size,
        device=cfg.device,
    )


def run_loss_sweep(
    manifest: Manifest,
    cfg: TrainConfig,
    lambdas: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    out_dir="runs/sweep",
    singles: Sequence[str] = ("dice", "bce", "recall_ce"),
) -> List[Tuple[str, MetricReport]]:
    """One training run per loss configuration, each scored on the test split."""
    out_dir = Path(out_dir)
    rows = []
    for label, spec in sweep_loss_specs(lambdas, cfg.loss, singles):
        run_cfg = dataclasses.replace(cfg, loss=spec)
        slug = label.replace("(", "_").replace(")", "").replace(".", "p")
        rows.append((label, _train_and_score(manifest, run_cfg, out_dir, slug)))
    table = format_table(rows, label_header="loss")
    (out_dir / "sweep_table.txt").write_text(table + "\n", encoding="utf-8")
    write_records(out_dir / "sweep_records.jsonl", rows, kind="loss_sweep")
    print(table)
    return rows


def run_ablation(
    manifest: Manifest, cfg: TrainConfig, out_dir="runs/ablation"
) -> List[Tuple[str, MetricReport]]:
    """Fused vs CNN-only vs transformer-only, same seed and loss for all three."""
    out_dir = Path(out_dir)
    spec = dataclasses.replace(cfg.loss, kind="bce_dice", lam=0.5)
    rows = []
    for mode in ("fused", "cnn_only", "transformer_only"):
        run_cfg = dataclasses.replace(
            cfg, loss=spec, model=dataclasses.replace(cfg.model, mode=mode)
        )
        rows.append((mode, _train_and_score(manifest, run_cfg, out_dir, mode)))
    table = format_table(rows, label_header="path")
    (out_dir / "ablation_table.txt").write_text(table + "\n", encoding="utf-8")
    write_records(out_dir / "ablation_records.jsonl", rows, kind="ablation")
    print(table)
    return rows
