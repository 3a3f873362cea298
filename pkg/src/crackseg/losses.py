"""Training objectives for binary crack segmentation.

All losses take a probability map `pred` in (0, 1) and a {0, 1} target of the
same shape, and return a non-negative scalar. Probabilities are clamped to
[clamp, 1 - clamp] before any log.
"""

from dataclasses import dataclass

import torch

LOSS_KINDS = ("bce", "dice", "bce_dice", "recall_ce")


@dataclass(frozen=True)
class LossSpec:
    """Selects one of the four objectives and its numeric parameters.

    `lam` weights the BCE term of the bce_dice combination (config key
    "lambda"); `smooth` is the Dice smoothing constant; `clamp` bounds
    probabilities away from 0 and 1 for log safety.
    """

    kind: str = "bce_dice"
    lam: float = 0.2
    smooth: float = 1.0
    clamp: float = 1e-7

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.smooth <= 0.0:
            raise ValueError("smooth must be positive")
        if not 0.0 < self.clamp < 0.5:
            raise ValueError("clamp must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam, "smooth": self.smooth, "clamp": self.clamp}

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def _check_shapes(pred: torch.Tensor, target: torch.Tensor):
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")


def bce_loss(pred: torch.Tensor, target: torch.Tensor, clamp: float = 1e-7) -> torch.Tensor:
    """Mean per-pixel binary cross entropy: -[y log p + (1-y) log(1-p)]."""
    _check_shapes(pred, target)
    p = pred.clamp(clamp, 1.0 - clamp)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss: 1 - (2*sum(p*y) + s) / (sum(p) + sum(y) + s), no thresholding."""
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + target.sum() + smooth)


def bce_dice_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    lam: float = 0.2,
    smooth: float = 1.0,
    clamp: float = 1e-7,
) -> torch.Tensor:
    """Affine combination lam * BCE + (1 - lam) * Dice."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam * bce_loss(pred, target, clamp) + (1.0 - lam) * dice_loss(pred, target, smooth)


def recall_ce_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    clamp: float = 1e-7,
    threshold: float = 0.5,
) -> torch.Tensor:
    """Cross entropy with each class weighted by (1 - recall of that class).

    Per-class recall is recomputed from the current batch's hard predictions
    at `threshold` and carries no gradient. A class absent from the batch
    contributes nothing. The weighted sum is normalized by the total pixel
    count so magnitudes stay comparable with plain BCE.
    """
    _check_shapes(pred, target)
    pos = target > 0.5
    neg = ~pos
    with torch.no_grad():
        hard = pred > threshold
        n_pos = pos.sum()
        n_neg = neg.sum()
        w_pos = 1.0 - (hard & pos).sum() / n_pos if n_pos else pred.new_zeros(())
        w_neg = 1.0 - (~hard & neg).sum() / n_neg if n_neg else pred.new_zeros(())

    p = pred.clamp(clamp, 1.0 - clamp)
    loss = pred.new_zeros(())
    if n_pos:
        loss = loss + w_pos * -torch.log(p[pos]).sum()
    if n_neg:
        loss = loss + w_neg * -torch.log(1.0 - p[neg]).sum()
    return loss / pred.numel()


def build_loss(spec: LossSpec):
    """Bind a LossSpec to a callable (pred, target) -> scalar."""
    if spec.kind == "bce":
        return lambda pred, target: bce_loss(pred, target, spec.clamp)
    if spec.kind == "dice":
        return lambda pred, target: dice_loss(pred, target, spec.smooth)
    if spec.kind == "bce_dice":
        return lambda pred, target: bce_dice_loss(pred, target, spec.lam, spec.smooth, spec.clamp)
    return lambda pred, target: recall_ce_loss(pred, target, spec.clamp)
